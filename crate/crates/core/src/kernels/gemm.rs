//! im2col followed by a tiled `W (k x crs) * cols (crs x hw)` product.

use crate::kernels::im2col::unroll_into;
use crate::kernels::{clamp_tile, for_each_oc_tile, Accum, ConvGeometry, Schedule, Widen};
use crate::tensor::Shape4;

pub(crate) fn conv<I, W, A>(input: &[I], shape: Shape4, g: &ConvGeometry, weights: &[W], sched: &Schedule) -> Vec<A>
where
    I: Widen<A>,
    W: Widen<A>,
    A: Accum,
{
    let (ho, wo) = g.output_hw(shape.h, shape.w).expect("validated by caller");
    let plane = ho * wo;
    let depth = g.filter_len();
    let tile_oc = clamp_tile(sched.tile_oc, g.k);
    // Columns are the flattened output pixels; a spatial tile spans tile_h rows
    // of tile_w pixels.
    let tile_p = clamp_tile(sched.tile_h * sched.tile_w, plane);
    let mut cols = Vec::new();
    let mut out = vec![A::default(); shape.n * g.k * plane];
    for (n, sample_out) in out.chunks_mut(g.k * plane).enumerate() {
        unroll_into(&input[n * shape.sample_len()..(n + 1) * shape.sample_len()], shape.h, shape.w, g, &mut cols);
        let cols = &cols;
        for_each_oc_tile(sample_out, plane, tile_oc, sched.parallel, |k0, tile| {
            let rows = tile.len() / plane;
            for p0 in (0..plane).step_by(tile_p) {
                let p1 = (p0 + tile_p).min(plane);
                let mut r = 0;
                while r < rows {
                    let block = sched.unroll.min(rows - r);
                    for q in 0..depth {
                        let col = &cols[q * plane + p0..q * plane + p1];
                        for b in 0..block {
                            let wv = weights[(k0 + r + b) * depth + q].widen();
                            let dst = &mut tile[(r + b) * plane + p0..(r + b) * plane + p1];
                            for (d, &v) in dst.iter_mut().zip(col) {
                                *d += wv * v.widen();
                            }
                        }
                    }
                    r += block;
                }
            }
        });
    }
    out
}
