use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tensor::{Matrix, Tensor4};

/// Unrolls the windows of a single-sample input into a
/// `(c*r*s) x (h_out*w_out)` matrix.
///
/// Row `(c*r + i)*s + j`, column `y*w_out + x` holds
/// `in[c, y*stride+i-pad, x*stride+j-pad]`, or zero when that tap falls in the
/// padding. Overlapping windows duplicate input elements.
pub fn im2col(input: &Tensor4, geom: &ConvGeometry) -> Result<Matrix> {
    let shape = input.shape();
    if shape.n != 1 {
        return Err(Error::Shape(format!("im2col takes one sample at a time, got batch {}", shape.n)));
    }
    geom.output_shape(shape)?;
    let (ho, wo) = geom.output_hw(shape.h, shape.w)?;
    let mut data = Vec::new();
    unroll_into(input.data(), shape.h, shape.w, geom, &mut data);
    Matrix::new(geom.filter_len(), ho * wo, data)
}

pub(crate) fn unroll_into<T: Copy + Default>(sample: &[T], h: usize, w: usize, g: &ConvGeometry, out: &mut Vec<T>) {
    let (ho, wo) = g.output_hw(h, w).expect("validated by caller");
    out.clear();
    out.resize(g.filter_len() * ho * wo, T::default());
    for c in 0..g.c {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for i in 0..g.r {
            for j in 0..g.s {
                let row_start = g.tap_index(c, i, j) * ho * wo;
                let row = &mut out[row_start..row_start + ho * wo];
                for y in 0..ho {
                    let iy = (y * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for x in 0..wo {
                        let ix = (x * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[y * wo + x] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn input(c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor4 {
        Tensor4::new(Shape4::new(1, c, h, w).unwrap(), data).unwrap()
    }

    #[test]
    fn single_window() {
        let g = ConvGeometry::new(1, 1, 2, 2, 1, 0).unwrap();
        let m = im2col(&input(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]), &g).unwrap();
        assert_eq!((m.rows, m.cols), (4, 1));
        assert_eq!(m.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn overlapping_windows_match_enumeration() {
        let g = ConvGeometry::new(1, 1, 2, 2, 1, 0).unwrap();
        let x = input(1, 3, 3, (1..=9).map(|v| v as f32).collect());
        let m = im2col(&x, &g).unwrap();
        assert_eq!((m.rows, m.cols), (4, 4));
        // Brute-force enumeration of every window, column by column.
        for y in 0..2 {
            for xo in 0..2 {
                let col = y * 2 + xo;
                let expected: Vec<f32> =
                    [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(i, j)| x.get(0, 0, y + i, xo + j)).collect();
                let got: Vec<f32> = (0..4).map(|r| m.get(r, col)).collect();
                assert_eq!(got, expected);
            }
        }
        assert_eq!((0..4).map(|r| m.get(r, 0)).collect::<Vec<_>>(), vec![1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn centre_tap_with_padding() {
        let g = ConvGeometry::new(1, 1, 3, 3, 1, 1).unwrap();
        let m = im2col(&input(1, 1, 1, vec![7.0]), &g).unwrap();
        assert_eq!((m.rows, m.cols), (9, 1));
        let mut expected = vec![0.0; 9];
        expected[4] = 7.0;
        assert_eq!(m.data, expected);
    }

    #[test]
    fn rejects_batches() {
        let g = ConvGeometry::new(1, 1, 1, 1, 1, 0).unwrap();
        let x = Tensor4::new(Shape4::new(2, 1, 1, 1).unwrap(), vec![1.0, 2.0]).unwrap();
        assert!(im2col(&x, &g).is_err());
    }
}
