//! CSR-weight convolution in the three algorithm variants. Zero weights are
//! never multiplied; each stored nonzero is applied once per output pixel.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::im2col::unroll_into;
use crate::kernels::spatial_pack::pack_input;
use crate::kernels::{add_bias, clamp_tile, for_each_oc_tile, Algorithm, ConvGeometry, ConvSpec, ConvWeights, Schedule};
use crate::tensor::{CsrMatrix, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseConvOutput {
    pub output: Tensor4,
    /// Multiplications executed: `nnz * h_out * w_out` per sample.
    pub multiplies: u64,
}

/// Sparse convolution, variant selected by `sched.algorithm`:
/// `Direct` gathers the input tap for each nonzero, `Gemm` multiplies the CSR
/// matrix with the im2col matrix, `SpatialPack` walks nonzeros over packed
/// input tiles.
pub fn sparse_conv2d(input: &Tensor4, spec: &ConvSpec, sched: &Schedule) -> Result<SparseConvOutput> {
    sched.validate()?;
    let csr = match &spec.weights {
        ConvWeights::Sparse(m) => m,
        _ => return Err(Error::Unsupported("sparse kernel invoked with non-CSR weights".into())),
    };
    csr.validate()?;
    let g = &spec.geom;
    let out_shape = g.output_shape(input.shape())?;
    let plane = out_shape.h * out_shape.w;
    let counter = AtomicU64::new(0);
    let mut acc = vec![0.0f32; out_shape.len()];
    let in_shape = input.shape();
    for (n, sample_out) in acc.chunks_mut(g.k * plane).enumerate() {
        let sample = input.sample(n);
        match sched.algorithm {
            Algorithm::Direct => direct(sample, in_shape.h, in_shape.w, g, csr, sched, sample_out, &counter),
            Algorithm::Gemm => gemm(sample, in_shape.h, in_shape.w, g, csr, sched, sample_out, &counter),
            Algorithm::SpatialPack => spatial(sample, in_shape.h, in_shape.w, g, csr, sched, sample_out, &counter),
        }
    }
    Ok(SparseConvOutput { output: add_bias(out_shape, acc, spec), multiplies: counter.into_inner() })
}

/// Splits a tap index back into `(c, i, j)`.
#[inline]
fn tap(g: &ConvGeometry, q: usize) -> (usize, usize, usize) {
    (q / (g.r * g.s), (q / g.s) % g.r, q % g.s)
}

fn pad_planar(sample: &[f32], c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let dst = (ch * hp + y + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(&sample[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn direct(
    sample: &[f32],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    csr: &CsrMatrix,
    sched: &Schedule,
    out: &mut [f32],
    counter: &AtomicU64,
) {
    let (ho, wo) = g.output_hw(h, w).expect("validated");
    let plane = ho * wo;
    let (hp, wp) = (h + 2 * g.pad, w + 2 * g.pad);
    let padded = pad_planar(sample, g.c, h, w, g.pad);
    let tile_oc = clamp_tile(sched.tile_oc, g.k);
    let tile_h = clamp_tile(sched.tile_h, ho);
    let tile_w = clamp_tile(sched.tile_w, wo);
    let unroll = sched.unroll;
    for_each_oc_tile(out, plane, tile_oc, sched.parallel, |k0, tile| {
        let mut executed = 0u64;
        for (dk, out_k) in tile.chunks_mut(plane).enumerate() {
            let (cols, vals) = csr.row(k0 + dk);
            // Offset of each nonzero's tap relative to the window origin.
            let offsets: Vec<usize> = cols
                .iter()
                .map(|&q| {
                    let (c, i, j) = tap(g, q);
                    (c * hp + i) * wp + j
                })
                .collect();
            for y0 in (0..ho).step_by(tile_h) {
                for x0 in (0..wo).step_by(tile_w) {
                    let (y1, x1) = ((y0 + tile_h).min(ho), (x0 + tile_w).min(wo));
                    for y in y0..y1 {
                        let mut x = x0;
                        while x < x1 {
                            let u = unroll.min(x1 - x);
                            let mut acc = [0.0f32; 8];
                            for (&off, &wv) in offsets.iter().zip(vals) {
                                for (d, a) in acc.iter_mut().enumerate().take(u) {
                                    let origin = y * g.stride * wp + (x + d) * g.stride;
                                    *a += wv * padded[off + origin];
                                }
                            }
                            out_k[y * wo + x..y * wo + x + u].copy_from_slice(&acc[..u]);
                            x += u;
                        }
                    }
                    executed += (vals.len() * (y1 - y0) * (x1 - x0)) as u64;
                }
            }
        }
        counter.fetch_add(executed, Ordering::Relaxed);
    });
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    sample: &[f32],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    csr: &CsrMatrix,
    sched: &Schedule,
    out: &mut [f32],
    counter: &AtomicU64,
) {
    let (ho, wo) = g.output_hw(h, w).expect("validated");
    let plane = ho * wo;
    let mut cols = Vec::new();
    unroll_into(sample, h, w, g, &mut cols);
    let cols = &cols;
    let tile_oc = clamp_tile(sched.tile_oc, g.k);
    let tile_p = clamp_tile(sched.tile_h * sched.tile_w, plane);
    for_each_oc_tile(out, plane, tile_oc, sched.parallel, |k0, tile| {
        let mut executed = 0u64;
        for (dk, out_k) in tile.chunks_mut(plane).enumerate() {
            let (idx, vals) = csr.row(k0 + dk);
            for p0 in (0..plane).step_by(tile_p) {
                let p1 = (p0 + tile_p).min(plane);
                let dst = &mut out_k[p0..p1];
                for (&q, &wv) in idx.iter().zip(vals) {
                    let col = &cols[q * plane + p0..q * plane + p1];
                    for (d, &v) in dst.iter_mut().zip(col) {
                        *d += wv * v;
                    }
                }
                executed += (vals.len() * (p1 - p0)) as u64;
            }
        }
        counter.fetch_add(executed, Ordering::Relaxed);
    });
}

#[allow(clippy::too_many_arguments)]
fn spatial(
    sample: &[f32],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    csr: &CsrMatrix,
    sched: &Schedule,
    out: &mut [f32],
    counter: &AtomicU64,
) {
    let (ho, wo) = g.output_hw(h, w).expect("validated");
    let plane = ho * wo;
    let wp = w + 2 * g.pad;
    let packed = pack_input(sample, g.c, h, w, g.pad);
    let packed = &packed;
    let tile_oc = clamp_tile(sched.tile_oc, g.k);
    let tile_h = clamp_tile(sched.tile_h, ho);
    let tile_w = clamp_tile(sched.tile_w, wo);
    for_each_oc_tile(out, plane, tile_oc, sched.parallel, |k0, tile| {
        let mut executed = 0u64;
        let width = tile.len() / plane;
        let mut acc = vec![0.0f32; tile_h * tile_w];
        for y0 in (0..ho).step_by(tile_h) {
            let th = tile_h.min(ho - y0);
            for x0 in (0..wo).step_by(tile_w) {
                let tw = tile_w.min(wo - x0);
                for o in 0..width {
                    let (idx, vals) = csr.row(k0 + o);
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for (&q, &wv) in idx.iter().zip(vals) {
                        let (c, i, j) = tap(g, q);
                        for y in 0..th {
                            let iy = (y0 + y) * g.stride + i;
                            let row = &mut acc[y * tile_w..y * tile_w + tw];
                            for (x, a) in row.iter_mut().enumerate() {
                                let ix = (x0 + x) * g.stride + j;
                                *a += wv * packed[(iy * wp + ix) * g.c + c];
                            }
                        }
                    }
                    for y in 0..th {
                        let dst = o * plane + (y0 + y) * wo + x0;
                        tile[dst..dst + tw].copy_from_slice(&acc[y * tile_w..y * tile_w + tw]);
                    }
                    executed += (vals.len() * th * tw) as u64;
                }
            }
        }
        counter.fetch_add(executed, Ordering::Relaxed);
    });
}
