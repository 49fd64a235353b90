use crate::error::{Error, Result};
use crate::kernels::{ConvSpec, ConvWeights};
use crate::tensor::Tensor4;

/// Textbook sliding-window convolution, the oracle every other kernel is
/// checked against.
///
/// `out[n,k,y,x] = bias[k] + sum_{c,i,j} in[n, c, y*stride+i-pad, x*stride+j-pad] * w[k,c,i,j]`
/// with taps outside the input contributing nothing. The sum runs with `c`,
/// then `i`, then `j` ascending and the bias is added last.
pub fn conv2d_reference(input: &Tensor4, spec: &ConvSpec) -> Result<Tensor4> {
    let w = match &spec.weights {
        ConvWeights::Dense(t) => t,
        _ => return Err(Error::Unsupported("reference convolution needs dense f32 weights".into())),
    };
    let g = spec.geom;
    let in_shape = input.shape();
    let out_shape = g.output_shape(in_shape)?;
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..out_shape.n {
        for k in 0..g.k {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let mut acc = 0.0f32;
                    for c in 0..g.c {
                        for i in 0..g.r {
                            let iy = (y * g.stride + i) as isize - g.pad as isize;
                            if iy < 0 || iy >= in_shape.h as isize {
                                continue;
                            }
                            for j in 0..g.s {
                                let ix = (x * g.stride + j) as isize - g.pad as isize;
                                if ix < 0 || ix >= in_shape.w as isize {
                                    continue;
                                }
                                acc += input.get(n, c, iy as usize, ix as usize) * w.get(k, c, i, j);
                            }
                        }
                    }
                    out.set(n, k, y, x, acc + spec.bias_or_zero(k));
                }
            }
        }
    }
    Ok(out)
}
