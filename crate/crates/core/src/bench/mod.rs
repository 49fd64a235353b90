//! Latency measurement, the compression x algorithm x tuning sweep, and its
//! reports.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compress::Technique;
use crate::error::{Error, Result};
use crate::graph::{forward, Model, ScheduleMap};
use crate::tensor::{Shape4, Tensor4};

mod curves;
mod report;
mod sweep;
pub mod timer;

pub use curves::{accuracy_curve_csv, emit_accuracy_curves, CurvePoint, CURVE_CSV_HEADER};
pub use report::{summarize, Summary, CSV_HEADER};
pub use sweep::{run_sweep, BenchRecord, ErrorCell, SweepConfig, SweepReport, TechniqueKind};
pub use timer::{CostModelTimer, FnTimer, MonotonicTimer, Probe, ProbeLayer, SequenceTimer, Timer, TimerFixture};

/// Serializes measurements process-wide so concurrent callers do not
/// disturb each other's timings.
static MEASURE_LOCK: Mutex<()> = Mutex::new(());

/// Median of the samples; the mean of the two middle values for an even
/// count.
pub fn median(samples: &[u64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] as f64 } else { (v[mid - 1] as f64 + v[mid] as f64) / 2.0 })
}

/// Result of [`measure`]: the median over the timed runs, plus every
/// sample including the discarded warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub median_ns: f64,
    /// `runs + 1` samples; the first is the warm-up.
    pub samples: Vec<u64>,
}

impl Measurement {
    pub fn runs(&self) -> usize {
        self.samples.len() - 1
    }

    /// Samples that count, warm-up excluded.
    pub fn timed(&self) -> &[u64] {
        &self.samples[1..]
    }

    pub fn min_ns(&self) -> u64 {
        self.timed().iter().copied().min().unwrap_or(0)
    }

    pub fn max_ns(&self) -> u64 {
        self.timed().iter().copied().max().unwrap_or(0)
    }

    /// Interquartile range by nearest rank.
    pub fn iqr_ns(&self) -> u64 {
        let mut v = self.timed().to_vec();
        v.sort_unstable();
        let rank = |p: usize| v[((p * v.len()).div_ceil(100)).saturating_sub(1).min(v.len() - 1)];
        rank(75) - rank(25)
    }
}

/// Times `runs + 1` executions of `work`, discarding the first as warm-up.
pub fn measure_with(
    timer: &mut dyn Timer,
    probe: Probe<'_>,
    runs: usize,
    mut work: impl FnMut() -> Result<()>,
) -> Result<Measurement> {
    if runs < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 timed runs, got {runs}")));
    }
    let _guard = MEASURE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut samples = Vec::with_capacity(runs + 1);
    for run in 0..=runs {
        let ns = timer.time(&Probe { run, ..probe }, &mut work)?;
        if ns == 0 {
            return Err(Error::Timer("timer returned 0 ns".into()));
        }
        samples.push(ns);
    }
    let median_ns = median(&samples[1..]).expect("runs >= 2");
    Ok(Measurement { median_ns, samples })
}

/// Per-convolution probe entries for `model` under `schedules`.
pub fn probe_layers(model: &Model, schedules: &ScheduleMap) -> Result<Vec<ProbeLayer>> {
    let shapes = model.shapes()?;
    model
        .conv_layers()
        .enumerate()
        .map(|(ordinal, (i, conv))| {
            let out = shapes[i + 1];
            let weights = if conv.spec.weights.is_sparse() {
                conv.spec.weights.nnz()
            } else {
                conv.spec.geom.k * conv.spec.geom.filter_len()
            };
            Ok(ProbeLayer { layer: i, schedule: *schedules.for_conv(ordinal)?, macs: (weights * out.h * out.w) as u64 })
        })
        .collect()
}

/// Uniform `[-1, 1)` input of `shape` drawn from `seed`, for timing when no
/// dataset is at hand.
pub fn seeded_input(shape: Shape4, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Median forward latency of `model` on a single-image `input`.
pub fn measure(
    model: &Model,
    schedules: &ScheduleMap,
    input: &Tensor4,
    runs: usize,
    timer: &mut dyn Timer,
    technique: Option<Technique>,
) -> Result<Measurement> {
    if input.shape().n != 1 {
        return Err(Error::Shape(format!("latency is measured at batch 1, got {}", input.shape())));
    }
    let layers = probe_layers(model, schedules)?;
    let probe = Probe {
        label: &model.name,
        technique,
        dtype: model.dtype,
        sparse: model.is_sparse(),
        layers: &layers,
        run: 0,
    };
    measure_with(timer, probe, runs, || forward(model, input, schedules).map(drop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_toy_workload, WorkloadConfig};
    use crate::kernels::{Algorithm, Schedule};

    fn toy() -> (Model, Tensor4) {
        let (m, _, test) = generate_toy_workload(&WorkloadConfig { train: 1, test: 1, ..WorkloadConfig::default() }).unwrap();
        (m, test.inputs[0].clone())
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[3, 5, 4]), Some(4.0));
        assert_eq!(median(&[2, 4, 6, 8]), Some(5.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn warm_up_is_discarded() {
        let (m, x) = toy();
        let s = ScheduleMap::Shared(Schedule::untuned(Algorithm::Gemm));
        let mut t = SequenceTimer::new(vec![9, 3, 5, 4]).unwrap();
        let r = measure(&m, &s, &x, 3, &mut t, None).unwrap();
        assert_eq!(r.median_ns, 4.0);
        assert_eq!(r.samples, vec![9, 3, 5, 4]);
        let mut t = SequenceTimer::new(vec![7]).unwrap();
        assert_eq!(measure(&m, &s, &x, 4, &mut t, None).unwrap().median_ns, 7.0);
        let mut t = SequenceTimer::new(vec![1, 3]).unwrap();
        assert!(measure(&m, &s, &x, 1, &mut t, None).is_err());
    }

    #[test]
    fn probe_reports_macs() {
        let (m, _) = toy();
        let s = ScheduleMap::Shared(Schedule::untuned(Algorithm::Direct));
        let layers = probe_layers(&m, &s).unwrap();
        let total: u64 = layers.iter().map(|l| l.macs).sum();
        assert_eq!(total, crate::compress::count_macs(&m).unwrap());
    }

    #[test]
    fn dispersion() {
        let m = Measurement { median_ns: 0.0, samples: vec![100, 1, 2, 3, 4] };
        assert_eq!((m.min_ns(), m.max_ns(), m.iqr_ns(), m.runs()), (1, 4, 2, 4));
    }

    proptest::proptest! {
        #[test]
        fn warm_up_never_matters(warm in 1u64..u64::MAX / 2, rest in proptest::collection::vec(1u64..1_000_000, 2..12)) {
            let mut seq = vec![warm];
            seq.extend(&rest);
            let mut t = SequenceTimer::new(seq).unwrap();
            let probe = Probe { label: "p", technique: None, dtype: crate::tensor::DType::F32, sparse: false, layers: &[], run: 0 };
            let got = measure_with(&mut t, probe, rest.len(), || Ok(())).unwrap();
            proptest::prop_assert_eq!(got.median_ns, median(&rest).unwrap());
        }
    }
}
