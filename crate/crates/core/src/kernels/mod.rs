//! Convolution kernels (direct, im2col + GEMM, spatial pack) in dense, CSR
//! sparse, float16 and int8 flavours, plus the layer primitives around them.
//!
//! Every kernel accumulates each output element over its taps in the same
//! ascending `(c, i, j)` order as [`conv2d_reference`], so tiling, unrolling
//! and threading change the traversal but not the floating-point sum.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use half::f16;

use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, DType, QTensor4, Shape4, Tensor4};

mod direct;
mod gemm;
mod im2col;
mod lowp;
mod ops;
mod reference;
mod schedule;
mod sparse;
mod spatial_pack;
pub mod verify;

pub use im2col::im2col;
pub use lowp::{f16_conv2d, quantized_conv2d_i8};
pub use ops::{argmax, dense_layer, global_avg_pool, maxpool2d, pool_output_hw, relu, softmax};
pub use reference::conv2d_reference;
pub use schedule::{Algorithm, Schedule, UNROLL_FACTORS};
pub use sparse::{sparse_conv2d, SparseConvOutput};
pub use spatial_pack::{pack_input, pack_weights, PackedWeights};

/// Convolution hyper-parameters, independent of the weight storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    /// Output channels.
    pub k: usize,
    /// Input channels.
    pub c: usize,
    pub r: usize,
    pub s: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(k: usize, c: usize, r: usize, s: usize, stride: usize, pad: usize) -> Result<Self> {
        let g = ConvGeometry { k, c, r, s, stride, pad };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.c == 0 || self.r == 0 || self.s == 0 || self.stride == 0 {
            return Err(Error::Shape(format!("degenerate convolution geometry {self:?}")));
        }
        Ok(())
    }

    /// Length of one filter, `c * r * s`; also the GEMM reduction depth.
    pub const fn filter_len(&self) -> usize {
        self.c * self.r * self.s
    }

    /// Row of the matricized weight / im2col matrix for tap `(c, i, j)`.
    #[inline]
    pub const fn tap_index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.r + i) * self.s + j
    }

    /// Output spatial size; errors when a window would not fit or the stride
    /// does not divide the padded extent.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |extent: usize, kernel: usize, axis: &str| -> Result<usize> {
            let padded = extent + 2 * self.pad;
            if padded < kernel {
                return Err(Error::Shape(format!(
                    "kernel {axis} {kernel} exceeds padded input {axis} {padded}"
                )));
            }
            if !(padded - kernel).is_multiple_of(self.stride) {
                return Err(Error::Shape(format!(
                    "non-integral output {axis}: ({extent} + 2*{} - {kernel}) / {}",
                    self.pad, self.stride
                )));
            }
            Ok((padded - kernel) / self.stride + 1)
        };
        Ok((out(h, self.r, "height")?, out(w, self.s, "width")?))
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.c {
            return Err(Error::Shape(format!("input has {} channels, convolution expects {}", input.c, self.c)));
        }
        let (ho, wo) = self.output_hw(input.h, input.w)?;
        Shape4::new(input.n, self.k, ho, wo)
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4 { n: self.k, c: self.c, h: self.r, w: self.s }
    }
}

/// Convolution weights in one of the supported storage formats. Dense
/// layouts are `(k, c, r, s)`; CSR is the `k x (c*r*s)` matricization.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvWeights {
    Dense(Tensor4<f32>),
    Sparse(CsrMatrix),
    F16(Tensor4<f16>),
    I8(QTensor4),
}

impl ConvWeights {
    pub fn dtype(&self) -> DType {
        match self {
            ConvWeights::Dense(_) | ConvWeights::Sparse(_) => DType::F32,
            ConvWeights::F16(_) => DType::F16,
            ConvWeights::I8(_) => DType::I8,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, ConvWeights::Sparse(_))
    }

    /// Weights as a dense f32 `(k, c, r, s)` buffer.
    pub fn to_dense_f32(&self) -> Vec<f32> {
        match self {
            ConvWeights::Dense(t) => t.data().to_vec(),
            ConvWeights::Sparse(m) => m.to_dense().map(|d| d.data).unwrap_or_default(),
            ConvWeights::F16(t) => t.data().iter().map(|v| v.to_f32()).collect(),
            ConvWeights::I8(q) => q.dequantize().into_data(),
        }
    }

    pub fn nnz(&self) -> usize {
        match self {
            ConvWeights::Sparse(m) => m.nnz(),
            ConvWeights::Dense(t) => t.data().iter().filter(|v| **v != 0.0).count(),
            ConvWeights::F16(t) => t.data().iter().filter(|v| v.to_f32() != 0.0).count(),
            ConvWeights::I8(q) => q.tensor.data().iter().filter(|v| **v != 0).count(),
        }
    }
}

/// Packed-weight cache keyed by output-channel tile size. Cloning a spec
/// starts an empty cache.
#[derive(Default)]
pub(crate) struct PackCache {
    f32_blocks: Mutex<HashMap<usize, Arc<PackedWeights<f32>>>>,
    f16_blocks: Mutex<HashMap<usize, Arc<PackedWeights<f16>>>>,
    i8_blocks: Mutex<HashMap<usize, Arc<PackedWeights<i8>>>>,
}

impl Clone for PackCache {
    fn clone(&self) -> Self {
        PackCache::default()
    }
}

impl std::fmt::Debug for PackCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PackCache")
    }
}

fn cached<W: Copy>(
    map: &Mutex<HashMap<usize, Arc<PackedWeights<W>>>>,
    tile_oc: usize,
    build: impl FnOnce() -> PackedWeights<W>,
) -> Arc<PackedWeights<W>> {
    let mut map = map.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(tile_oc).or_insert_with(|| Arc::new(build())).clone()
}

/// A convolution layer: geometry, weights and optional per-channel bias.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub geom: ConvGeometry,
    pub weights: ConvWeights,
    pub bias: Option<Vec<f32>>,
    pack_cache: PackCache,
}

impl PartialEq for ConvSpec {
    fn eq(&self, other: &Self) -> bool {
        self.geom == other.geom && self.weights == other.weights && self.bias == other.bias
    }
}

impl ConvSpec {
    pub fn new(geom: ConvGeometry, weights: ConvWeights, bias: Option<Vec<f32>>) -> Result<Self> {
        geom.validate()?;
        match &weights {
            ConvWeights::Dense(t) => check_weight_shape(&geom, t.shape())?,
            ConvWeights::F16(t) => check_weight_shape(&geom, t.shape())?,
            ConvWeights::I8(q) => {
                check_weight_shape(&geom, q.shape())?;
                q.quant.validate()?;
            }
            ConvWeights::Sparse(m) => {
                m.validate()?;
                if m.rows() != geom.k || m.cols() != geom.filter_len() {
                    return Err(Error::Shape(format!(
                        "sparse weights are {}x{}, expected {}x{}",
                        m.rows(),
                        m.cols(),
                        geom.k,
                        geom.filter_len()
                    )));
                }
            }
        }
        if let Some(b) = &bias {
            if b.len() != geom.k {
                return Err(Error::Shape(format!("bias has {} entries, expected {}", b.len(), geom.k)));
            }
        }
        Ok(ConvSpec { geom, weights, bias, pack_cache: PackCache::default() })
    }

    /// Dense f32 convolution from a flat `(k, c, r, s)` buffer.
    pub fn dense(geom: ConvGeometry, weights: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        let t = Tensor4::new(geom.weight_shape(), weights)?;
        ConvSpec::new(geom, ConvWeights::Dense(t), bias)
    }

    /// Converts dense f32 weights to CSR. Other storage is returned unchanged.
    pub fn to_sparse(&self) -> ConvSpec {
        match &self.weights {
            ConvWeights::Dense(t) => ConvSpec {
                geom: self.geom,
                weights: ConvWeights::Sparse(CsrMatrix::from_row_major(self.geom.k, self.geom.filter_len(), t.data())),
                bias: self.bias.clone(),
                pack_cache: PackCache::default(),
            },
            _ => self.clone(),
        }
    }

    /// Converts CSR weights back to a dense tensor.
    pub fn to_dense(&self) -> ConvSpec {
        match &self.weights {
            ConvWeights::Sparse(_) => ConvSpec {
                geom: self.geom,
                weights: ConvWeights::Dense(
                    Tensor4::new(self.geom.weight_shape(), self.weights.to_dense_f32()).expect("valid CSR"),
                ),
                bias: self.bias.clone(),
                pack_cache: PackCache::default(),
            },
            _ => self.clone(),
        }
    }

    pub fn bias_or_zero(&self, k: usize) -> f32 {
        self.bias.as_ref().map_or(0.0, |b| b[k])
    }

    pub(crate) fn packed_f32(&self, tile_oc: usize, weights: &[f32]) -> Arc<PackedWeights<f32>> {
        cached(&self.pack_cache.f32_blocks, tile_oc, || pack_weights(weights, self.geom.k, self.geom.filter_len(), tile_oc))
    }

    pub(crate) fn packed_f16(&self, tile_oc: usize, weights: &[f16]) -> Arc<PackedWeights<f16>> {
        cached(&self.pack_cache.f16_blocks, tile_oc, || pack_weights(weights, self.geom.k, self.geom.filter_len(), tile_oc))
    }

    pub(crate) fn packed_i8(&self, tile_oc: usize, weights: &[i8]) -> Arc<PackedWeights<i8>> {
        cached(&self.pack_cache.i8_blocks, tile_oc, || pack_weights(weights, self.geom.k, self.geom.filter_len(), tile_oc))
    }
}

fn check_weight_shape(geom: &ConvGeometry, shape: Shape4) -> Result<()> {
    if shape != geom.weight_shape() {
        return Err(Error::Shape(format!("weights have shape {shape}, expected {}", geom.weight_shape())));
    }
    Ok(())
}

/// Dense f32 convolution dispatched on the weight format and
/// `sched.algorithm`. Sparse weights run the matching sparse variant.
pub fn conv2d(input: &Tensor4, spec: &ConvSpec, sched: &Schedule) -> Result<Tensor4> {
    match &spec.weights {
        ConvWeights::Sparse(_) => sparse_conv2d(input, spec, sched).map(|o| o.output),
        ConvWeights::Dense(_) => match sched.algorithm {
            Algorithm::Direct => conv2d_direct(input, spec, sched),
            Algorithm::Gemm => conv2d_gemm(input, spec, sched),
            Algorithm::SpatialPack => conv2d_spatial_pack(input, spec, sched),
        },
        other => Err(Error::Unsupported(format!("{} weights need the matching low-precision kernel", other.dtype()))),
    }
}

pub fn conv2d_direct(input: &Tensor4, spec: &ConvSpec, sched: &Schedule) -> Result<Tensor4> {
    sched.expect(Algorithm::Direct)?;
    let weights = dense_f32(spec)?;
    let out_shape = spec.geom.output_shape(input.shape())?;
    let acc = direct::conv::<f32, f32, f32>(input.data(), input.shape(), &spec.geom, weights, sched);
    Ok(add_bias(out_shape, acc, spec))
}

pub fn conv2d_gemm(input: &Tensor4, spec: &ConvSpec, sched: &Schedule) -> Result<Tensor4> {
    sched.expect(Algorithm::Gemm)?;
    let weights = dense_f32(spec)?;
    let out_shape = spec.geom.output_shape(input.shape())?;
    let acc = gemm::conv::<f32, f32, f32>(input.data(), input.shape(), &spec.geom, weights, sched);
    Ok(add_bias(out_shape, acc, spec))
}

pub fn conv2d_spatial_pack(input: &Tensor4, spec: &ConvSpec, sched: &Schedule) -> Result<Tensor4> {
    sched.expect(Algorithm::SpatialPack)?;
    let weights = dense_f32(spec)?;
    let out_shape = spec.geom.output_shape(input.shape())?;
    let packed = spec.packed_f32(sched.tile_oc, weights);
    let acc = spatial_pack::conv::<f32, f32, f32>(input.data(), input.shape(), &spec.geom, &packed, sched);
    Ok(add_bias(out_shape, acc, spec))
}

fn dense_f32(spec: &ConvSpec) -> Result<&[f32]> {
    match &spec.weights {
        ConvWeights::Dense(t) => Ok(t.data()),
        other => Err(Error::Unsupported(format!(
            "dense f32 kernel invoked with {} weights",
            if other.is_sparse() { "sparse" } else { other.dtype().name() }
        ))),
    }
}

fn add_bias(shape: Shape4, mut acc: Vec<f32>, spec: &ConvSpec) -> Tensor4 {
    if let Some(bias) = &spec.bias {
        let plane = shape.h * shape.w;
        for (i, ch) in acc.chunks_mut(plane).enumerate() {
            let b = bias[i % shape.c];
            ch.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor4::new(shape, acc).expect("kernel produced the planned output size")
}

/// `|actual - expected| <= rtol * max(|actual|, |expected|)`.
pub fn rel_close(actual: f32, expected: f32, rtol: f32) -> bool {
    actual == expected || (actual - expected).abs() <= rtol * actual.abs().max(expected.abs())
}

/// Number types the generic kernels accumulate in.
pub(crate) trait Accum: Copy + Default + Send + Sync + std::ops::AddAssign + std::ops::Mul<Output = Self> {}

impl Accum for f32 {}
impl Accum for i32 {}

/// Conversion of a stored operand to its accumulation type.
pub(crate) trait Widen<A>: Copy + Default + Send + Sync {
    fn widen(self) -> A;
}

impl Widen<f32> for f32 {
    #[inline(always)]
    fn widen(self) -> f32 {
        self
    }
}

impl Widen<f32> for f16 {
    #[inline(always)]
    fn widen(self) -> f32 {
        self.to_f32()
    }
}

impl Widen<i32> for i8 {
    #[inline(always)]
    fn widen(self) -> i32 {
        self as i32
    }
}

impl Widen<i32> for i16 {
    #[inline(always)]
    fn widen(self) -> i32 {
        self as i32
    }
}

/// Splits one sample's `k x plane` output into output-channel tiles and runs
/// `body(first_channel, tile)` on each, across threads when asked.
pub(crate) fn for_each_oc_tile<A: Send>(
    out: &mut [A],
    plane: usize,
    tile_oc: usize,
    parallel: bool,
    body: impl Fn(usize, &mut [A]) + Sync + Send,
) {
    use rayon::prelude::*;
    let chunk = (tile_oc * plane).max(1);
    if parallel {
        out.par_chunks_mut(chunk).enumerate().for_each(|(t, tile)| body(t * tile_oc, tile));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(t, tile)| body(t * tile_oc, tile));
    }
}

/// Clamps a tile size to the extent it tiles.
#[inline]
pub(crate) fn clamp_tile(tile: usize, extent: usize) -> usize {
    tile.clamp(1, extent.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        let g = ConvGeometry::new(1, 1, 3, 3, 1, 1).unwrap();
        assert_eq!(g.output_hw(5, 5).unwrap(), (5, 5));
        let g = ConvGeometry::new(1, 1, 3, 3, 2, 0).unwrap();
        assert_eq!(g.output_hw(5, 7).unwrap(), (2, 3));
        assert!(g.output_hw(4, 5).is_err());
        let g = ConvGeometry::new(1, 1, 5, 5, 1, 0).unwrap();
        assert!(g.output_hw(3, 3).is_err());
    }

    #[test]
    fn spec_validation() {
        let g = ConvGeometry::new(2, 1, 1, 1, 1, 0).unwrap();
        assert!(ConvSpec::dense(g, vec![1.0; 3], None).is_err());
        assert!(ConvSpec::dense(g, vec![1.0; 2], Some(vec![0.0])).is_err());
        let csr = CsrMatrix::from_row_major(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(ConvSpec::new(g, ConvWeights::Sparse(csr), None).is_err());
    }

    #[test]
    fn algorithm_mismatch_rejected() {
        let g = ConvGeometry::new(1, 1, 1, 1, 1, 0).unwrap();
        let spec = ConvSpec::dense(g, vec![2.0], None).unwrap();
        let x = Tensor4::new(Shape4::new(1, 1, 1, 1).unwrap(), vec![3.0]).unwrap();
        assert!(conv2d_gemm(&x, &spec, &Schedule::untuned(Algorithm::Direct)).is_err());
        assert_eq!(conv2d(&x, &spec, &Schedule::untuned(Algorithm::Gemm)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sparse_dense_conversion_round_trip() {
        let g = ConvGeometry::new(2, 1, 1, 2, 1, 0).unwrap();
        let spec = ConvSpec::dense(g, vec![0.0, 1.0, 2.0, 0.0], Some(vec![1.0, 2.0])).unwrap();
        let sparse = spec.to_sparse();
        assert!(sparse.weights.is_sparse());
        assert_eq!(sparse.weights.nnz(), 2);
        assert_eq!(sparse.to_dense(), spec);
    }
}
