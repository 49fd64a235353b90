//! Sliding-window convolution over the unreshaped NCHW input.

use crate::kernels::{clamp_tile, for_each_oc_tile, Accum, ConvGeometry, Schedule, Widen};
use crate::tensor::Shape4;

/// Bias-free accumulators for every output element, laid out NCHW.
pub(crate) fn conv<I, W, A>(input: &[I], shape: Shape4, g: &ConvGeometry, weights: &[W], sched: &Schedule) -> Vec<A>
where
    I: Widen<A>,
    W: Widen<A>,
    A: Accum,
{
    let (ho, wo) = g.output_hw(shape.h, shape.w).expect("validated by caller");
    let plane = ho * wo;
    let tile_oc = clamp_tile(sched.tile_oc, g.k);
    let tile_h = clamp_tile(sched.tile_h, ho);
    let tile_w = clamp_tile(sched.tile_w, wo);
    let mut out = vec![A::default(); shape.n * g.k * plane];
    for (n, sample_out) in out.chunks_mut(g.k * plane).enumerate() {
        let sample = &input[n * shape.sample_len()..(n + 1) * shape.sample_len()];
        let win = Window { input: sample, h: shape.h, w: shape.w, g, weights };
        for_each_oc_tile(sample_out, plane, tile_oc, sched.parallel, |k0, tile| {
            for (dk, out_k) in tile.chunks_mut(plane).enumerate() {
                let k = k0 + dk;
                for y0 in (0..ho).step_by(tile_h) {
                    for x0 in (0..wo).step_by(tile_w) {
                        for y in y0..(y0 + tile_h).min(ho) {
                            let row = &mut out_k[y * wo..(y + 1) * wo];
                            let x_end = (x0 + tile_w).min(wo);
                            match sched.unroll {
                                8 => win.run::<8, A>(k, y, x0, x_end, row),
                                4 => win.run::<4, A>(k, y, x0, x_end, row),
                                2 => win.run::<2, A>(k, y, x0, x_end, row),
                                _ => win.run::<1, A>(k, y, x0, x_end, row),
                            }
                        }
                    }
                }
            }
        });
    }
    out
}

struct Window<'a, I, W> {
    input: &'a [I],
    h: usize,
    w: usize,
    g: &'a ConvGeometry,
    weights: &'a [W],
}

impl<I, W> Window<'_, I, W> {
    /// Computes outputs `x0..x_end` of row `y`, `U` at a time.
    #[inline]
    fn run<const U: usize, A>(&self, k: usize, y: usize, x0: usize, x_end: usize, row: &mut [A])
    where
        I: Widen<A>,
        W: Widen<A>,
        A: Accum,
    {
        let mut x = x0;
        while x + U <= x_end {
            let acc = self.outputs::<U, A>(k, y, x);
            row[x..x + U].copy_from_slice(&acc);
            x += U;
        }
        while x < x_end {
            row[x] = self.outputs::<1, A>(k, y, x)[0];
            x += 1;
        }
    }

    #[inline(always)]
    fn outputs<const U: usize, A>(&self, k: usize, y: usize, x: usize) -> [A; U]
    where
        I: Widen<A>,
        W: Widen<A>,
        A: Accum,
    {
        let g = self.g;
        let mut acc = [A::default(); U];
        let filter = &self.weights[k * g.filter_len()..(k + 1) * g.filter_len()];
        for c in 0..g.c {
            let plane = &self.input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..g.r {
                let iy = (y * g.stride + i) as isize - g.pad as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                let in_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                for j in 0..g.s {
                    let wv = filter[g.tap_index(c, i, j)].widen();
                    for (u, a) in acc.iter_mut().enumerate() {
                        let ix = ((x + u) * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < self.w as isize {
                            *a += wv * in_row[ix as usize].widen();
                        }
                    }
                }
            }
        }
        acc
    }
}
