use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{LabeledDataset, Layer, Model, ScheduleMap};
use crate::kernels::{
    argmax, conv2d, dense_layer, f16_conv2d, global_avg_pool, maxpool2d, quantized_conv2d_i8, relu, softmax, Schedule,
};
use crate::tensor::{dequantize_i8, quantize_i8, round_to_f16, DType, Shape4, Tensor4};

/// Runs convolution layer `layer` of `model` at the model's dtype.
///
/// Activations travel between layers as f32; float16 models keep them
/// rounded to f16 values and int8 models quantize each convolution input
/// with the parameters of that activation.
pub fn run_conv_layer(model: &Model, layer: usize, input: &Tensor4, sched: &Schedule) -> Result<Tensor4> {
    let conv = model
        .layers
        .get(layer)
        .and_then(Layer::as_conv)
        .ok_or_else(|| Error::layer(layer, "not a convolution"))?;
    let spec = &conv.spec;
    match model.dtype {
        DType::F32 => conv2d(input, spec, sched),
        DType::F16 => Ok(f16_conv2d(&input.to_f16(), spec, sched)?.to_f32()),
        DType::I8 => {
            let params = model
                .activation_quant
                .as_ref()
                .ok_or_else(|| Error::MissingQuant("int8 model without activation parameters".into()))?;
            let (in_q, out_q) = match (params.get(layer), params.get(layer + 1)) {
                (Some(a), Some(b)) => (*a, *b),
                _ => return Err(Error::MissingQuant(format!("no activation parameters around layer {layer}"))),
            };
            Ok(quantized_conv2d_i8(&input.quantize(in_q), spec, out_q, sched)?.dequantize())
        }
    }
}

fn softmax_channels(t: &Tensor4) -> Tensor4 {
    let s = t.shape();
    let mut out = t.clone();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let v: Vec<f32> = (0..s.c).map(|c| t.get(n, c, y, x)).collect();
                for (c, p) in softmax(&v).into_iter().enumerate() {
                    out.set(n, c, y, x, p);
                }
            }
        }
    }
    out
}

/// Executes the model, calling `visit(i, activation)` for every activation
/// from the input (`i = 0`) to the output (`i = layers.len()`).
pub fn forward_activations(
    model: &Model,
    input: &Tensor4,
    schedules: &ScheduleMap,
    mut visit: impl FnMut(usize, &Tensor4),
) -> Result<Tensor4> {
    if input.shape() != model.input {
        return Err(Error::Shape(format!("input {} does not match model input {}", input.shape(), model.input)));
    }
    let mut act = if model.dtype == DType::F16 { input.map(round_to_f16) } else { input.clone() };
    visit(0, &act);
    let mut conv_ordinal = 0;
    for (i, layer) in model.layers.iter().enumerate() {
        act = match layer {
            Layer::Conv2d(_) => {
                let sched = schedules.for_conv(conv_ordinal)?;
                conv_ordinal += 1;
                run_conv_layer(model, i, &act, sched).map_err(|e| match e {
                    Error::Layer { .. } => e,
                    other => Error::layer(i, other.to_string()),
                })?
            }
            Layer::Relu => relu(&act),
            Layer::MaxPool2d { window, stride } => maxpool2d(&act, *window, *stride)?,
            Layer::GlobalAvgPool => global_avg_pool(&act),
            Layer::Dense(d) => {
                let weights = d.weights.to_f32();
                let s = act.shape();
                let mut out = Vec::with_capacity(s.n * d.out_features);
                for n in 0..s.n {
                    out.extend(dense_layer(act.sample(n), &weights, d.bias.as_deref())?);
                }
                Tensor4::new(Shape4 { n: s.n, c: d.out_features, h: 1, w: 1 }, out)?
            }
            Layer::Softmax => softmax_channels(&act),
        };
        if !matches!(layer, Layer::Softmax | Layer::Conv2d(_)) {
            match (model.dtype, &model.activation_quant) {
                (DType::F16, _) => act = act.map(round_to_f16),
                // Non-convolution stages run in f32 and are requantized.
                (DType::I8, Some(q)) => {
                    let q = q[i + 1];
                    act = act.map(|v| dequantize_i8(quantize_i8(v, q), q));
                }
                _ => {}
            }
        }
        visit(i + 1, &act);
    }
    Ok(act)
}

/// Class scores for one input.
pub fn forward(model: &Model, input: &Tensor4, schedules: &ScheduleMap) -> Result<Vec<f32>> {
    Ok(forward_activations(model, input, schedules, |_, _| {})?.into_data())
}

/// Fraction of samples whose arg-max score equals the label.
pub fn evaluate_top1(model: &Model, dataset: &LabeledDataset, schedules: &ScheduleMap) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let hits = dataset
        .inputs
        .par_iter()
        .zip(&dataset.labels)
        .map(|(x, &label)| forward(model, x, schedules).map(|scores| usize::from(argmax(&scores) == label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DenseLayer;
    use crate::graph::DenseWeights;
    use crate::kernels::{Algorithm, ConvGeometry, ConvSpec};

    fn shared(a: Algorithm) -> ScheduleMap {
        ScheduleMap::Shared(Schedule::untuned(a))
    }

    #[test]
    fn identity_model_returns_input() {
        let g = ConvGeometry::new(1, 1, 1, 1, 1, 0).unwrap();
        let m = Model::new("id", Shape4::new(1, 1, 1, 1).unwrap(), 1, vec![Layer::conv(ConvSpec::dense(g, vec![1.0], None).unwrap())])
            .unwrap();
        let x = Tensor4::new(m.input, vec![0.375]).unwrap();
        for a in Algorithm::ALL {
            assert_eq!(forward(&m, &x, &shared(a)).unwrap(), vec![0.375]);
        }
    }

    #[test]
    fn softmax_head_sums_to_one() {
        let g = ConvGeometry::new(3, 1, 2, 2, 1, 0).unwrap();
        let w: Vec<f32> = (0..12).map(|v| v as f32 * 0.1 - 0.5).collect();
        let m = Model::new(
            "sm",
            Shape4::new(1, 1, 3, 3).unwrap(),
            3,
            vec![Layer::conv(ConvSpec::dense(g, w, None).unwrap()), Layer::GlobalAvgPool, Layer::Softmax],
        )
        .unwrap();
        let x = Tensor4::from_fn(m.input, |_, _, y, x| (y * 3 + x) as f32);
        let p = forward(&m, &x, &shared(Algorithm::Gemm)).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn dense_layer_executes() {
        let g = ConvGeometry::new(2, 1, 1, 1, 1, 0).unwrap();
        let m = Model::new(
            "d",
            Shape4::new(1, 1, 1, 2).unwrap(),
            1,
            vec![
                Layer::conv(ConvSpec::dense(g, vec![1.0, 2.0], None).unwrap()),
                Layer::Dense(DenseLayer {
                    in_features: 4,
                    out_features: 1,
                    weights: DenseWeights::F32(vec![1.0, 1.0, 1.0, 1.0]),
                    bias: Some(vec![0.5]),
                    bias_quant: None,
                }),
            ],
        )
        .unwrap();
        let x = Tensor4::new(m.input, vec![1.0, 2.0]).unwrap();
        // conv: [1, 2] and [2, 4]; dense sums to 9, plus bias.
        assert_eq!(forward(&m, &x, &shared(Algorithm::Direct)).unwrap(), vec![9.5]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = ConvGeometry::new(1, 1, 1, 1, 1, 0).unwrap();
        let m = Model::new("id", Shape4::new(1, 1, 1, 1).unwrap(), 1, vec![Layer::conv(ConvSpec::dense(g, vec![1.0], None).unwrap())])
            .unwrap();
        let x = Tensor4::new(Shape4::new(1, 1, 2, 1).unwrap(), vec![0.0, 0.0]).unwrap();
        assert!(forward(&m, &x, &shared(Algorithm::Direct)).is_err());
        let empty = LabeledDataset { inputs: vec![], labels: vec![], classes: 1, seed: 0 };
        assert!(evaluate_top1(&m, &empty, &shared(Algorithm::Direct)).is_err());
    }
}
