//! Spatial-pack convolution.
//!
//! Weights are packed once into output-channel blocks laid out
//! `[block][tap][oc_in_block]` so the innermost loop walks contiguous weights
//! for `tile_oc` channels at a time. The input is packed per sample into a
//! padded channel-interleaved `[y][x][c]` buffer: a permutation of the padded
//! input with no duplicated elements, unlike im2col.

use crate::kernels::{clamp_tile, for_each_oc_tile, Accum, ConvGeometry, Schedule, Widen};
use crate::tensor::Shape4;

/// Weights packed into output-channel blocks. The tail block is narrower when
/// `tile_oc` does not divide `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedWeights<W> {
    pub tile_oc: usize,
    pub depth: usize,
    pub blocks: Vec<Vec<W>>,
}

impl<W> PackedWeights<W> {
    pub fn block_width(&self, b: usize) -> usize {
        self.blocks[b].len() / self.depth.max(1)
    }
}

/// Packs a `k x depth` row-major weight matrix into `tile_oc`-wide blocks.
pub fn pack_weights<W: Copy>(weights: &[W], k: usize, depth: usize, tile_oc: usize) -> PackedWeights<W> {
    let tile_oc = clamp_tile(tile_oc, k);
    let blocks = (0..k)
        .step_by(tile_oc)
        .map(|k0| {
            let width = tile_oc.min(k - k0);
            let mut block = Vec::with_capacity(width * depth);
            for q in 0..depth {
                for o in 0..width {
                    block.push(weights[(k0 + o) * depth + q]);
                }
            }
            block
        })
        .collect();
    PackedWeights { tile_oc, depth, blocks }
}

/// Packs one `c x h x w` sample into a zero-padded `[y][x][c]` buffer of
/// `c * (h + 2*pad) * (w + 2*pad)` elements.
pub fn pack_input<T: Copy + Default>(sample: &[T], c: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::default(); c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[((y + pad) * wp + x + pad) * c + ch] = sample[(ch * h + y) * w + x];
            }
        }
    }
    out
}

pub(crate) fn conv<I, W, A>(
    input: &[I],
    shape: Shape4,
    g: &ConvGeometry,
    packed: &PackedWeights<W>,
    sched: &Schedule,
) -> Vec<A>
where
    I: Widen<A>,
    W: Widen<A>,
    A: Accum,
{
    let (ho, wo) = g.output_hw(shape.h, shape.w).expect("validated by caller");
    let plane = ho * wo;
    let tile_h = clamp_tile(sched.tile_h, ho);
    let tile_w = clamp_tile(sched.tile_w, wo);
    let wp = shape.w + 2 * g.pad;
    let mut out = vec![A::default(); shape.n * g.k * plane];
    for (n, sample_out) in out.chunks_mut(g.k * plane).enumerate() {
        let sample = &input[n * shape.sample_len()..(n + 1) * shape.sample_len()];
        let packed_in = pack_input(sample, shape.c, shape.h, shape.w, g.pad);
        let packed_in = &packed_in;
        for_each_oc_tile(sample_out, plane, packed.tile_oc, sched.parallel, |k0, tile| {
            let block = &packed.blocks[k0 / packed.tile_oc];
            let width = tile.len() / plane;
            let mut acc = vec![A::default(); width * tile_h * tile_w];
            for y0 in (0..ho).step_by(tile_h) {
                let th = tile_h.min(ho - y0);
                for x0 in (0..wo).step_by(tile_w) {
                    let tw = tile_w.min(wo - x0);
                    acc.iter_mut().for_each(|a| *a = A::default());
                    for c in 0..g.c {
                        for i in 0..g.r {
                            for j in 0..g.s {
                                let q = g.tap_index(c, i, j);
                                let wrow = &block[q * width..(q + 1) * width];
                                for y in 0..th {
                                    let iy = (y0 + y) * g.stride + i;
                                    let mut x = 0;
                                    while x < tw {
                                        let u = sched.unroll.min(tw - x);
                                        let mut vals = [A::default(); 8];
                                        for (d, v) in vals.iter_mut().enumerate().take(u) {
                                            let ix = (x0 + x + d) * g.stride + j;
                                            *v = packed_in[(iy * wp + ix) * g.c + c].widen();
                                        }
                                        for (o, &wv) in wrow.iter().enumerate() {
                                            let wv = wv.widen();
                                            let base = (o * tile_h + y) * tile_w + x;
                                            for d in 0..u {
                                                acc[base + d] += wv * vals[d];
                                            }
                                        }
                                        x += u;
                                    }
                                }
                            }
                        }
                    }
                    for o in 0..width {
                        for y in 0..th {
                            let src = &acc[(o * tile_h + y) * tile_w..(o * tile_h + y) * tile_w + tw];
                            let dst = o * plane + (y0 + y) * wo + x0;
                            tile[dst..dst + tw].copy_from_slice(src);
                        }
                    }
                }
            }
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_blocks_clamp_tail() {
        // k = 3 rows, depth 2.
        let w = [1, 2, 3, 4, 5, 6];
        let p = pack_weights(&w, 3, 2, 2);
        assert_eq!(p.blocks, vec![vec![1, 3, 2, 4], vec![5, 6]]);
        assert_eq!(p.block_width(1), 1);
        assert_eq!(pack_weights(&w, 3, 2, 2), p);
        // Oversized tiles clamp to k.
        assert_eq!(pack_weights(&w, 3, 2, 64).blocks.len(), 1);
    }

    #[test]
    fn packed_input_preserves_element_count() {
        let sample: Vec<u32> = (1..=2 * 3 * 4).collect();
        let packed = pack_input(&sample, 2, 3, 4, 0);
        assert_eq!(packed.len(), sample.len());
        let mut sorted = packed.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, sample);
        // Channel-interleaved: (y=0, x=0) holds both channels first.
        assert_eq!(&packed[..2], &[1, 13]);

        let padded = pack_input(&sample, 2, 3, 4, 1);
        assert_eq!(padded.len(), 2 * 5 * 6);
        assert_eq!(padded.iter().filter(|&&v| v != 0).count(), sample.len());
    }
}
