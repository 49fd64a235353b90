use half::f16;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{forward_activations, ConvLayer, DenseWeights, LabeledDataset, Layer, Model, ScheduleMap};
use crate::kernels::{Algorithm, ConvSpec, ConvWeights, Schedule};
use crate::tensor::{dequantize_i8, quantize_i8, round_to_f16, DType, QTensor4, QuantParams, Tensor4};

/// Activation range assumed when no calibration data is used.
pub const UNCALIBRATED_RANGE: (f32, f32) = (-4.0, 4.0);

fn require_f32(model: &Model) -> Result<Model> {
    if model.dtype != DType::F32 {
        return Err(Error::Unsupported(format!("quantization needs an f32 model, got {}", model.dtype)));
    }
    Ok(model.to_dense())
}

/// Activation parameters for [`UNCALIBRATED_RANGE`] at every layer boundary.
pub fn uncalibrated_params(model: &Model) -> Vec<QuantParams> {
    vec![QuantParams::from_min_max(UNCALIBRATED_RANGE.0, UNCALIBRATED_RANGE.1); model.layers.len() + 1]
}

/// Per-tensor min/max of every activation (input included) over the
/// calibration set, turned into affine int8 parameters.
pub fn calibrate_i8(model: &Model, calibration: &LabeledDataset) -> Result<Vec<QuantParams>> {
    if calibration.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let model = require_f32(model)?;
    let schedules = ScheduleMap::Shared(Schedule::untuned(Algorithm::Gemm));
    let boundaries = model.layers.len() + 1;
    let identity = || vec![(f32::INFINITY, f32::NEG_INFINITY); boundaries];
    let ranges = calibration
        .inputs
        .par_iter()
        .map(|x| {
            let mut r = identity();
            forward_activations(&model, x, &schedules, |i, act| {
                for &v in act.data() {
                    r[i] = (r[i].0.min(v), r[i].1.max(v));
                }
            })?;
            Ok::<_, Error>(r)
        })
        .try_reduce(identity, |a, b| Ok(a.into_iter().zip(b).map(|(p, q)| (p.0.min(q.0), p.1.max(q.1))).collect()))?;
    Ok(ranges.into_iter().map(|(lo, hi)| QuantParams::from_min_max(lo, hi)).collect())
}

fn max_abs(v: &[f32]) -> f32 {
    v.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

/// Casts every weight and bias to float16.
pub fn quantize_model_f16(model: &Model) -> Result<Model> {
    let mut out = require_f32(model)?;
    for layer in &mut out.layers {
        match layer {
            Layer::Conv2d(conv) => {
                let g = conv.spec.geom;
                let w = Tensor4::new(g.weight_shape(), conv.spec.weights.to_dense_f32())?.to_f16();
                let bias = conv.spec.bias.as_ref().map(|b| b.iter().copied().map(round_to_f16).collect());
                conv.spec = ConvSpec::new(g, ConvWeights::F16(w), bias)?;
            }
            Layer::Dense(d) => {
                d.weights = DenseWeights::F16(d.weights.to_f32().into_iter().map(f16::from_f32).collect());
                d.bias = d.bias.take().map(|b| b.into_iter().map(round_to_f16).collect());
            }
            _ => {}
        }
    }
    out.dtype = DType::F16;
    out.validate()?;
    Ok(out)
}

/// Symmetric per-tensor parameters and the values a stored int8 bias reads
/// back as.
fn quantize_bias(bias: &Option<Vec<f32>>) -> (Option<Vec<f32>>, Option<QuantParams>) {
    match bias {
        None => (None, None),
        Some(b) => {
            let q = QuantParams::symmetric(max_abs(b));
            (Some(b.iter().map(|&v| dequantize_i8(quantize_i8(v, q), q)).collect()), Some(q))
        }
    }
}

/// Quantizes weights and biases to int8 (symmetric, per tensor) and attaches
/// `activations`, one parameter set per layer boundary.
pub fn quantize_model_i8(model: &Model, activations: &[QuantParams]) -> Result<Model> {
    let mut out = require_f32(model)?;
    if activations.len() != out.layers.len() + 1 {
        return Err(Error::MissingQuant(format!(
            "{} activation parameter sets for {} layers",
            activations.len(),
            out.layers.len()
        )));
    }
    for layer in &mut out.layers {
        match layer {
            Layer::Conv2d(conv) => {
                let g = conv.spec.geom;
                let w = conv.spec.weights.to_dense_f32();
                let wq = QuantParams::symmetric(max_abs(&w));
                let tensor = Tensor4::new(g.weight_shape(), w.iter().map(|&v| quantize_i8(v, wq)).collect())?;
                let (bias, bias_quant) = quantize_bias(&conv.spec.bias);
                *conv = ConvLayer { spec: ConvSpec::new(g, ConvWeights::I8(QTensor4 { tensor, quant: wq }), bias)?, bias_quant };
            }
            Layer::Dense(d) => {
                let w = d.weights.to_f32();
                let wq = QuantParams::symmetric(max_abs(&w));
                d.weights = DenseWeights::I8(w.iter().map(|&v| quantize_i8(v, wq)).collect(), wq);
                (d.bias, d.bias_quant) = quantize_bias(&d.bias);
            }
            _ => {}
        }
    }
    out.dtype = DType::I8;
    out.activation_quant = Some(activations.to_vec());
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{evaluate_top1, forward};
    use crate::kernels::ConvGeometry;
    use crate::tensor::Shape4;

    fn integer_model() -> Model {
        // Integer weights in [-127, 127] with max 127 quantize at scale 1.
        let g = ConvGeometry::new(3, 1, 2, 2, 1, 0).unwrap();
        let w = vec![127.0, -3.0, 5.0, 0.0, 1.0, 2.0, 3.0, 4.0, -7.0, 7.0, -7.0, 7.0];
        Model::new(
            "int",
            Shape4::new(1, 1, 2, 2).unwrap(),
            3,
            vec![Layer::conv(ConvSpec::dense(g, w, None).unwrap()), Layer::GlobalAvgPool],
        )
        .unwrap()
    }

    #[test]
    fn calibration_examples() {
        let q = QuantParams::from_min_max(-1.28, 1.27);
        assert!((q.scale - 0.01).abs() < 1e-8);
        assert_eq!(q.zero_point, 0);
        assert_eq!(QuantParams::from_min_max(5.0, 5.0), QuantParams { scale: 1.0, zero_point: 0 });
    }

    #[test]
    fn calibrated_ranges_cover_activations() {
        let m = integer_model();
        let x = Tensor4::new(m.input, vec![0.5, -0.25, 0.125, 1.0]).unwrap();
        let data = LabeledDataset::new(vec![x], vec![0], 3, 0).unwrap();
        let p = calibrate_i8(&m, &data).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0], QuantParams::from_min_max(-0.25, 1.0));
        let empty = LabeledDataset { inputs: vec![], labels: vec![], classes: 3, seed: 0 };
        assert!(calibrate_i8(&m, &empty).is_err());
    }

    #[test]
    fn identity_scale_model_agrees_with_f32() {
        let m = integer_model();
        let inputs: Vec<Tensor4> = (0..16)
            .map(|k| Tensor4::from_fn(m.input, |_, _, y, x| ((k * 7 + y * 3 + x * 5) % 11) as f32 - 5.0))
            .collect();
        let labels: Vec<usize> = {
            let s = ScheduleMap::Shared(Schedule::untuned(Algorithm::Direct));
            inputs.iter().map(|x| crate::kernels::argmax(&forward(&m, x, &s).unwrap())).collect()
        };
        let data = LabeledDataset::new(inputs, labels, 3, 0).unwrap();
        let q = quantize_model_i8(&m, &calibrate_i8(&m, &data).unwrap()).unwrap();
        let ConvWeights::I8(w) = &q.conv_layers().next().unwrap().1.spec.weights else { panic!() };
        assert_eq!(w.quant.scale, 1.0);
        for a in Algorithm::ALL {
            let s = ScheduleMap::Shared(Schedule::untuned(a));
            assert_eq!(evaluate_top1(&q, &data, &s).unwrap(), 1.0);
        }
    }

    #[test]
    fn f16_exact_weights_keep_outputs() {
        let m = integer_model();
        let h = quantize_model_f16(&m).unwrap();
        assert_eq!(h.dtype, DType::F16);
        let x = Tensor4::new(m.input, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let s = ScheduleMap::Shared(Schedule::untuned(Algorithm::SpatialPack));
        assert_eq!(forward(&m, &x, &s).unwrap(), forward(&h, &x, &s).unwrap());
        assert!(quantize_model_f16(&h).is_err());
    }

    #[test]
    fn wrong_parameter_count() {
        let m = integer_model();
        assert!(quantize_model_i8(&m, &uncalibrated_params(&m)[..1]).is_err());
        assert_eq!(quantize_model_i8(&m, &uncalibrated_params(&m)).unwrap().dtype, DType::I8);
    }
}
