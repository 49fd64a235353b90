//! Reduced-precision convolution: emulated float16 and int8 with 32-bit
//! integer accumulation.

use half::f16;

use crate::error::{Error, Result};
use crate::kernels::{direct, gemm, spatial_pack, Accum, Algorithm, ConvGeometry, ConvSpec, ConvWeights, Schedule, Widen};
use crate::tensor::{quantize_i8, QTensor4, QuantParams, Shape4, Tensor4};

fn run<I, W, A>(
    input: &[I],
    shape: Shape4,
    g: &ConvGeometry,
    weights: &[W],
    sched: &Schedule,
    packed: impl FnOnce() -> std::sync::Arc<spatial_pack::PackedWeights<W>>,
) -> Vec<A>
where
    I: Widen<A>,
    W: Widen<A>,
    A: Accum,
{
    match sched.algorithm {
        Algorithm::Direct => direct::conv(input, shape, g, weights, sched),
        Algorithm::Gemm => gemm::conv(input, shape, g, weights, sched),
        Algorithm::SpatialPack => spatial_pack::conv(input, shape, g, &packed(), sched),
    }
}

/// Float16 convolution in software: operands widen to f32 at use, sums
/// accumulate in f32 and each output is rounded back to f16.
pub fn f16_conv2d(input: &Tensor4<f16>, spec: &ConvSpec, sched: &Schedule) -> Result<Tensor4<f16>> {
    sched.validate()?;
    let weights = match &spec.weights {
        ConvWeights::F16(t) => t.data(),
        other => return Err(Error::Unsupported(format!("f16 kernel invoked with {} weights", other.dtype()))),
    };
    let g = &spec.geom;
    let out_shape = g.output_shape(input.shape())?;
    let acc: Vec<f32> =
        run(input.data(), input.shape(), g, weights, sched, || spec.packed_f16(sched.tile_oc, weights));
    let plane = out_shape.h * out_shape.w;
    let data = acc
        .iter()
        .enumerate()
        .map(|(idx, &a)| f16::from_f32(a + spec.bias_or_zero((idx / plane) % g.k)))
        .collect();
    Tensor4::new(out_shape, data)
}

/// Int8 convolution with symmetric per-tensor weights.
///
/// Accumulates `(in_q - in_zp) * w_q` in i32, rescales by
/// `in_scale * w_scale`, adds the real-valued bias and requantizes into
/// `out_params`.
pub fn quantized_conv2d_i8(
    input: &QTensor4,
    spec: &ConvSpec,
    out_params: QuantParams,
    sched: &Schedule,
) -> Result<QTensor4> {
    sched.validate()?;
    input.quant.validate()?;
    out_params.validate()?;
    let qw = match &spec.weights {
        ConvWeights::I8(q) => q,
        other => return Err(Error::MissingQuant(format!("int8 kernel invoked with {} weights", other.dtype()))),
    };
    if qw.quant.zero_point != 0 {
        return Err(Error::Unsupported(format!("weight zero point must be 0, got {}", qw.quant.zero_point)));
    }
    let g = &spec.geom;
    let out_shape = g.output_shape(input.shape())?;
    let zp = input.quant.zero_point;
    let centered: Vec<i16> = input.tensor.data().iter().map(|&v| (v as i32 - zp) as i16).collect();
    let weights = qw.tensor.data();
    let acc: Vec<i32> =
        run(&centered, input.shape(), g, weights, sched, || spec.packed_i8(sched.tile_oc, weights));
    let rescale = input.quant.scale * qw.quant.scale;
    let plane = out_shape.h * out_shape.w;
    let data = acc
        .iter()
        .enumerate()
        .map(|(idx, &a)| quantize_i8(a as f32 * rescale + spec.bias_or_zero((idx / plane) % g.k), out_params))
        .collect();
    Ok(QTensor4 { tensor: Tensor4::new(out_shape, data)?, quant: out_params })
}
