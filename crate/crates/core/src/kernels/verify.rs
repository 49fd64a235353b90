//! Seeded random equivalence checks of every kernel against
//! [`conv2d_reference`]. Backs the `verify` command.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{
    conv2d, conv2d_reference, f16_conv2d, quantized_conv2d_i8, rel_close, sparse_conv2d, Algorithm, ConvGeometry,
    ConvSpec, ConvWeights, Schedule, UNROLL_FACTORS,
};
use crate::tensor::{round_to_f16, QTensor4, QuantParams, Shape4, Tensor4};

/// Relative tolerance for f32 kernels against the reference.
pub const F32_RTOL: f32 = 1e-5;
/// float16 unit roundoff bound, 2^-10.
pub const F16_RTOL: f32 = 1.0 / 1024.0;

/// One randomly drawn convolution problem.
#[derive(Clone, Debug)]
pub struct Case {
    pub input: Tensor4,
    pub spec: ConvSpec,
}

/// Draws a convolution with `k, c, r, s <= 5`, `stride <= 3`, `pad <= 2`,
/// spatial extent `<= 12` and integral output size.
pub fn random_case(rng: &mut impl Rng) -> Case {
    loop {
        let (k, c) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (r, s) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=2usize.min(r.max(s) - 1));
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let n = if rng.random_range(0..8) == 0 { 2 } else { 1 };
        let Ok(geom) = ConvGeometry::new(k, c, r, s, stride, pad) else { continue };
        if geom.output_hw(h, w).is_err() {
            continue;
        }
        let weights: Vec<f32> = (0..geom.filter_len() * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = rng.random_bool(0.5).then(|| (0..k).map(|_| rng.random_range(-0.5..0.5)).collect());
        let spec = ConvSpec::dense(geom, weights, bias).expect("shapes agree");
        let shape = Shape4::new(n, c, h, w).expect("positive dims");
        let input = Tensor4::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("sized to shape");
        return Case { input, spec };
    }
}

pub fn random_schedule(rng: &mut impl Rng, algorithm: Algorithm) -> Schedule {
    let tile = |rng: &mut dyn rand::RngCore| 1usize << rng.random_range(0..5);
    Schedule {
        algorithm,
        tile_oc: tile(rng),
        tile_h: tile(rng),
        tile_w: tile(rng),
        unroll: UNROLL_FACTORS[rng.random_range(0..UNROLL_FACTORS.len())],
        parallel: rng.random_bool(0.3),
    }
}

/// Zeroes each weight with probability `fraction`.
pub fn prune_randomly(spec: &ConvSpec, fraction: f64, rng: &mut impl Rng) -> ConvSpec {
    let mut w = spec.weights.to_dense_f32();
    w.iter_mut().for_each(|v| {
        if rng.random_bool(fraction) {
            *v = 0.0
        }
    });
    ConvSpec::dense(spec.geom, w, spec.bias.clone()).expect("same geometry")
}

/// Outcome of a verification run: number of element-wise comparisons per
/// kernel and a description of each breach.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub cases: usize,
    pub checks: std::collections::BTreeMap<String, usize>,
    pub failures: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn check(&mut self, kernel: String, ok: bool, detail: impl FnOnce() -> String) {
        *self.checks.entry(kernel.clone()).or_default() += 1;
        if !ok {
            self.failures.push(format!("{kernel}: {}", detail()));
        }
    }
}

fn max_violation(got: &[f32], want: &[f32], ok: impl Fn(f32, f32) -> bool) -> Option<(usize, f32, f32)> {
    if got.len() != want.len() {
        return Some((usize::MAX, f32::NAN, f32::NAN));
    }
    got.iter().zip(want).enumerate().find(|(_, (g, w))| !ok(**g, **w)).map(|(i, (g, w))| (i, *g, *w))
}

/// Runs `cases` random problems through every dense, sparse, float16 and int8
/// kernel variant.
pub fn run(cases: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report { cases, ..Report::default() };
    for case_idx in 0..cases {
        let case = random_case(&mut rng);
        let reference = conv2d_reference(&case.input, &case.spec).expect("generated cases are valid");
        let out_shape = reference.shape();

        for algorithm in Algorithm::ALL {
            let sched = random_schedule(&mut rng, algorithm);
            let label = format!("dense/{algorithm}");
            match conv2d(&case.input, &case.spec, &sched) {
                Ok(out) => {
                    let bad = max_violation(out.data(), reference.data(), |g, w| rel_close(g, w, F32_RTOL));
                    report.check(label, bad.is_none(), || format!("case {case_idx} {sched:?}: {bad:?}"));
                }
                Err(e) => report.check(label, false, || format!("case {case_idx}: {e}")),
            }
        }

        let pruned = prune_randomly(&case.spec, rng.random_range(0.0..0.95), &mut rng);
        let pruned_ref = conv2d_reference(&case.input, &pruned).expect("valid");
        let sparse = pruned.to_sparse();
        let nnz = sparse.weights.nnz() as u64;
        let law = nnz * (out_shape.n * out_shape.h * out_shape.w) as u64;
        for algorithm in Algorithm::ALL {
            let sched = random_schedule(&mut rng, algorithm);
            let label = format!("sparse/{algorithm}");
            match sparse_conv2d(&case.input, &sparse, &sched) {
                Ok(out) => {
                    let bad = max_violation(out.output.data(), pruned_ref.data(), |g, w| rel_close(g, w, F32_RTOL));
                    report.check(label.clone(), bad.is_none(), || format!("case {case_idx} {sched:?}: {bad:?}"));
                    report.check(format!("{label}/multiplies"), out.multiplies == law, || {
                        format!("case {case_idx}: counted {} expected {law}", out.multiplies)
                    });
                }
                Err(e) => report.check(label, false, || format!("case {case_idx}: {e}")),
            }
        }

        check_f16(&case, &mut rng, &mut report, case_idx);
        check_i8(&case, &mut rng, &mut report, case_idx);
    }
    report
}

fn check_f16(case: &Case, rng: &mut impl Rng, report: &mut Report, case_idx: usize) {
    let g = case.spec.geom;
    let w32: Vec<f32> = case.spec.weights.to_dense_f32().into_iter().map(round_to_f16).collect();
    let bias: Option<Vec<f32>> = case.spec.bias.as_ref().map(|b| b.iter().copied().map(round_to_f16).collect());
    let x32 = case.input.map(round_to_f16);
    // Oracle: f32 reference on f16-rounded operands, then rounded to f16.
    let oracle = conv2d_reference(&x32, &ConvSpec::dense(g, w32.clone(), bias.clone()).expect("valid"))
        .expect("valid")
        .map(round_to_f16);
    let w16 = Tensor4::new(g.weight_shape(), w32.iter().map(|&v| f16::from_f32(v)).collect()).expect("sized");
    let spec = ConvSpec::new(g, ConvWeights::F16(w16), bias).expect("valid");
    let x16 = case.input.to_f16();
    for algorithm in Algorithm::ALL {
        let sched = random_schedule(rng, algorithm);
        let label = format!("f16/{algorithm}");
        match f16_conv2d(&x16, &spec, &sched) {
            Ok(out) => {
                let got: Vec<f32> = out.data().iter().map(|v| v.to_f32()).collect();
                let bad = max_violation(&got, oracle.data(), |g, w| {
                    (g - w).abs() <= F16_RTOL * w.abs() + f32::from(f16::MIN_POSITIVE_SUBNORMAL)
                });
                report.check(label, bad.is_none(), || format!("case {case_idx} {sched:?}: {bad:?}"));
            }
            Err(e) => report.check(label, false, || format!("case {case_idx}: {e}")),
        }
    }
}

fn range(v: &[f32]) -> (f32, f32) {
    v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn check_i8(case: &Case, rng: &mut impl Rng, report: &mut Report, case_idx: usize) {
    let g = case.spec.geom;
    let w = case.spec.weights.to_dense_f32();
    let wq = QuantParams::symmetric(w.iter().fold(0.0f32, |m, v| m.max(v.abs())));
    let (lo, hi) = range(case.input.data());
    let in_q = QuantParams::from_min_max(lo, hi);
    let qx = case.input.quantize(in_q);
    let qw = Tensor4::new(g.weight_shape(), w.iter().map(|&v| crate::tensor::quantize_i8(v, wq)).collect())
        .expect("sized");
    let qspec = ConvSpec::new(g, ConvWeights::I8(QTensor4 { tensor: qw.clone(), quant: wq }), case.spec.bias.clone())
        .expect("valid");
    // Oracle: f32 reference on the dequantized operands.
    let deq_spec = ConvSpec::dense(g, qw.data().iter().map(|&v| crate::tensor::dequantize_i8(v, wq)).collect(), case.spec.bias.clone())
        .expect("valid");
    let oracle = conv2d_reference(&qx.dequantize(), &deq_spec).expect("valid");
    let (olo, ohi) = range(oracle.data());
    let out_q = QuantParams::from_min_max(olo, ohi);
    let (rlo, rhi) = out_q.range();
    let slack = out_q.scale;
    for algorithm in Algorithm::ALL {
        let sched = random_schedule(rng, algorithm);
        let label = format!("i8/{algorithm}");
        match quantized_conv2d_i8(&qx, &qspec, out_q, &sched) {
            Ok(out) => {
                let got = out.dequantize();
                let bad = max_violation(got.data(), oracle.data(), |g, w| (g - w.clamp(rlo, rhi)).abs() <= slack);
                report.check(label, bad.is_none(), || format!("case {case_idx} {sched:?}: {bad:?}"));
            }
            Err(e) => report.check(label, false, || format!("case {case_idx}: {e}")),
        }
    }
}
