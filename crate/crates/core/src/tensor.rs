//! Dense NCHW tensors, element data types, and the CSR sparse matrix format.
//!
//! Every buffer here is a contiguous flat array. A [`Tensor4`] stores its
//! elements in NCHW row-major order, so the element at `(n, c, h, w)` lives at
//! `((n * C + c) * H + h) * W + w`.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a tensor or model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I8,
}

impl DType {
    pub const fn bytes_per_element(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I8 => "i8",
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Affine int8 quantization parameters: `real = (q - zero_point) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        let q = QuantParams { scale, zero_point };
        q.validate()?;
        Ok(q)
    }

    /// Symmetric parameters (`zero_point = 0`) covering `[-max_abs, max_abs]`.
    /// An all-zero tensor gets scale 1.
    pub fn symmetric(max_abs: f32) -> Self {
        let scale = if max_abs > 0.0 && max_abs.is_finite() { max_abs / 127.0 } else { 1.0 };
        QuantParams { scale, zero_point: 0 }
    }

    /// Affine parameters mapping an observed `[min, max]` onto `[-128, 127]`:
    /// `scale = (max - min) / 255`, `zero_point = round(-min / scale) - 128`.
    ///
    /// A degenerate range (`max == min`) yields scale 1 and zero point 0. A
    /// range that excludes zero is widened to include it so that real zero
    /// (padding, ReLU floor) stays exactly representable.
    pub fn from_min_max(min: f32, max: f32) -> Self {
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return QuantParams { scale: 1.0, zero_point: 0 };
        }
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let scale = (hi - lo) / 255.0;
        let zero_point = ((-lo / scale).round() as i32 - 128).clamp(-128, 127);
        QuantParams { scale, zero_point }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("quantization scale must be positive, got {}", self.scale)));
        }
        if !(-128..=127).contains(&self.zero_point) {
            return Err(Error::InvalidArgument(format!("zero point {} outside [-128, 127]", self.zero_point)));
        }
        Ok(())
    }

    /// Smallest and largest real values representable with these parameters.
    pub fn range(&self) -> (f32, f32) {
        (dequantize_i8(-128, *self), dequantize_i8(127, *self))
    }
}

/// `clamp(round_half_away_from_zero(x / scale) + zero_point, -128, 127)`.
#[inline]
pub fn quantize_i8(x: f32, q: QuantParams) -> i8 {
    let v = (x / q.scale).round() + q.zero_point as f32;
    // NaN maps to the zero point rather than to an arbitrary saturated value.
    if v.is_nan() {
        return q.zero_point as i8;
    }
    v.clamp(-128.0, 127.0) as i8
}

#[inline]
pub fn dequantize_i8(v: i8, q: QuantParams) -> f32 {
    (v as i32 - q.zero_point) as f32 * q.scale
}

/// Round-to-nearest-even conversion to IEEE binary16. Overflow gives ±inf and
/// subnormals are preserved.
#[inline]
pub fn cast_f16(x: f32) -> f16 {
    f16::from_f32(x)
}

#[inline]
pub fn cast_f32(x: f16) -> f32 {
    x.to_f32()
}

/// Rounds an f32 to the nearest binary16 value, returned as f32.
#[inline]
pub fn round_to_f16(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

/// Logical NCHW shape. All dimensions are at least one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("all dimensions must be >= 1, got [{n}, {c}, {h}, {w}]")));
        }
        Ok(Shape4 { n, c, h, w })
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one sample (`c * h * w`).
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Inverse of [`Shape4::index`].
    pub const fn coords(&self, mut flat: usize) -> (usize, usize, usize, usize) {
        let w = flat % self.w;
        flat /= self.w;
        let h = flat % self.h;
        flat /= self.h;
        let c = flat % self.c;
        (flat / self.c, c, h, w)
    }

    pub const fn to_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D tensor in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 { shape, data: vec![T::default(); shape.len()] }
    }
}

impl<T: Copy> Tensor4<T> {
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The contiguous slice holding sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Tensor4<U> {
        Tensor4 { shape: self.shape, data: self.data.iter().copied().map(f).collect() }
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Tensor4::new(shape, self.data)
    }
}

impl Tensor4<f32> {
    pub fn to_f16(&self) -> Tensor4<f16> {
        self.map(cast_f16)
    }

    pub fn quantize(&self, q: QuantParams) -> QTensor4 {
        QTensor4 { tensor: self.map(|x| quantize_i8(x, q)), quant: q }
    }
}

impl Tensor4<f16> {
    pub fn to_f32(&self) -> Tensor4<f32> {
        self.map(cast_f32)
    }
}

/// An int8 tensor together with its quantization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor4 {
    pub tensor: Tensor4<i8>,
    pub quant: QuantParams,
}

impl QTensor4 {
    pub fn shape(&self) -> Shape4 {
        self.tensor.shape()
    }

    pub fn dequantize(&self) -> Tensor4<f32> {
        let q = self.quant;
        self.tensor.map(|v| dequantize_i8(v, q))
    }
}

/// Row-major dense 2-D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} elements for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Compressed-sparse-row matrix of f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    indices: Vec<usize>,
    indptr: Vec<usize>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from raw arrays, checking every structural invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        indices: Vec<usize>,
        indptr: Vec<usize>,
    ) -> Result<Self> {
        let m = CsrMatrix { rows, cols, data, indices, indptr };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.indptr.len() != self.rows + 1 {
            return Err(Error::Csr(format!("indptr has {} entries, expected {}", self.indptr.len(), self.rows + 1)));
        }
        if self.indptr[0] != 0 {
            return Err(Error::Csr("indptr[0] must be 0".into()));
        }
        if self.data.len() != self.indices.len() {
            return Err(Error::Csr(format!("{} values but {} column indices", self.data.len(), self.indices.len())));
        }
        if self.indptr[self.rows] != self.data.len() {
            return Err(Error::Csr(format!(
                "indptr ends at {} but there are {} nonzeros",
                self.indptr[self.rows],
                self.data.len()
            )));
        }
        for r in 0..self.rows {
            let (start, end) = (self.indptr[r], self.indptr[r + 1]);
            if start > end {
                return Err(Error::Csr(format!("indptr decreases at row {r}")));
            }
            let cols = &self.indices[start..end];
            if let Some(&c) = cols.iter().find(|&&c| c >= self.cols) {
                return Err(Error::Csr(format!("column {c} out of range in row {r}")));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Csr(format!("column indices not strictly increasing in row {r}")));
            }
        }
        if let Some(i) = self.data.iter().position(|&v| v == 0.0) {
            return Err(Error::Csr(format!("explicit zero stored at position {i}")));
        }
        Ok(())
    }

    pub fn from_dense(m: &Matrix) -> Self {
        Self::from_row_major(m.rows, m.cols, &m.data)
    }

    /// Same as [`CsrMatrix::from_dense`] over a borrowed row-major buffer.
    pub fn from_row_major(rows: usize, cols: usize, values: &[f32]) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        let mut data = Vec::new();
        let mut indices = Vec::new();
        let mut indptr = Vec::with_capacity(rows + 1);
        indptr.push(0);
        for row in values.chunks(cols.max(1)).take(rows) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    data.push(v);
                    indices.push(j);
                }
            }
            indptr.push(data.len());
        }
        CsrMatrix { rows, cols, data, indices, indptr }
    }

    pub fn to_dense(&self) -> Result<Matrix> {
        self.validate()?;
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.data[r * self.cols + c] = v;
            }
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f32]) {
        let (s, e) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[s..e], &self.data[s..e])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flat_index_bijects_on_small_shapes() {
        for (n, c, h, w) in [(1, 1, 1, 1), (2, 3, 4, 5), (1, 4, 1, 3), (3, 1, 2, 2)] {
            let s = Shape4::new(n, c, h, w).unwrap();
            let mut seen = vec![false; s.len()];
            for a in 0..n {
                for b in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let i = s.index(a, b, y, x);
                            assert!(!seen[i]);
                            seen[i] = true;
                            assert_eq!(s.coords(i), (a, b, y, x));
                        }
                    }
                }
            }
            assert!(seen.iter().all(|&v| v));
        }
    }

    #[test]
    fn get_set_round_trip() {
        let s = Shape4::new(2, 2, 3, 3).unwrap();
        let mut t = Tensor4::<f32>::zeros(s);
        t.set(1, 0, 2, 1, 7.5);
        assert_eq!(t.get(1, 0, 2, 1), 7.5);
        assert_eq!(t.data()[s.index(1, 0, 2, 1)], 7.5);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Shape4::new(1, 0, 2, 2).is_err());
        let s = Shape4::new(1, 1, 2, 2).unwrap();
        assert!(Tensor4::new(s, vec![0.0f32; 3]).is_err());
    }

    #[test]
    fn dtype_sizes() {
        assert_eq!(DType::F32.bytes_per_element(), 4);
        assert_eq!(DType::F16.bytes_per_element(), 2);
        assert_eq!(DType::I8.bytes_per_element(), 1);
    }

    #[test]
    fn csr_from_dense_examples() {
        let m = Matrix::from_rows(&[&[0.0, 2.0], &[3.0, 0.0]]).unwrap();
        let csr = CsrMatrix::from_dense(&m);
        assert_eq!(csr.data(), &[2.0, 3.0]);
        assert_eq!(csr.indices(), &[1, 0]);
        assert_eq!(csr.indptr(), &[0, 1, 2]);
        assert_eq!(csr.to_dense().unwrap(), m);

        let z = CsrMatrix::from_dense(&Matrix::zeros(2, 2));
        assert!(z.data().is_empty() && z.indices().is_empty());
        assert_eq!(z.indptr(), &[0, 0, 0]);
    }

    #[test]
    fn csr_to_dense_examples() {
        let csr = CsrMatrix::from_parts(2, 2, vec![2.0, 3.0], vec![1, 0], vec![0, 1, 2]).unwrap();
        assert_eq!(csr.to_dense().unwrap().data, vec![0.0, 2.0, 3.0, 0.0]);
        let empty = CsrMatrix::from_parts(3, 3, vec![], vec![], vec![0, 0, 0, 0]).unwrap();
        assert_eq!(empty.to_dense().unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn csr_rejects_malformed() {
        assert!(CsrMatrix::from_parts(2, 2, vec![1.0], vec![0], vec![1, 1, 1]).is_err());
        assert!(CsrMatrix::from_parts(2, 2, vec![1.0, 2.0], vec![1, 0], vec![0, 2, 2]).is_err());
        assert!(CsrMatrix::from_parts(1, 2, vec![1.0], vec![2], vec![0, 1]).is_err());
        assert!(CsrMatrix::from_parts(1, 2, vec![0.0], vec![0], vec![0, 1]).is_err());
        assert!(CsrMatrix::from_parts(2, 2, vec![1.0], vec![0], vec![0, 1]).is_err());
        assert!(CsrMatrix::from_parts(2, 2, vec![1.0, 1.0], vec![0, 0], vec![0, 2, 1]).is_err());
    }

    #[test]
    fn csr_random_sparse_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..64)
            .map(|_| if rng.random::<f32>() < 0.7 { 0.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let m = Matrix::new(8, 8, data.clone()).unwrap();
        let back = CsrMatrix::from_dense(&m).to_dense().unwrap();
        // Oracle: a direct element-wise copy.
        assert_eq!(back.data, data);
    }

    #[test]
    fn f16_examples() {
        assert_eq!(cast_f32(cast_f16(1.0)), 1.0);
        assert_eq!(cast_f32(cast_f16(0.1)), 0.0999755859375);
        assert_eq!(cast_f32(cast_f16(70000.0)), f32::INFINITY);
        assert_eq!(cast_f32(cast_f16(-70000.0)), f32::NEG_INFINITY);
        // Smallest positive subnormal.
        let tiny = 2f32.powi(-24);
        assert_eq!(cast_f32(cast_f16(tiny)), tiny);
    }

    #[test]
    fn quantize_examples() {
        let q = QuantParams::new(0.1, 0).unwrap();
        assert_eq!(quantize_i8(0.25, q), 3);
        assert!((dequantize_i8(3, q) - 0.3).abs() < 1e-6);
        assert_eq!(quantize_i8(0.0, q), 0);
        assert_eq!(quantize_i8(1000.0, q), 127);
        assert_eq!(quantize_i8(-1000.0, q), -128);
        assert_eq!(quantize_i8(-0.25, q), -3);
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(1.0, 128).is_err());
    }

    #[test]
    fn affine_params_from_range() {
        let q = QuantParams::from_min_max(-1.28, 1.27);
        assert!((q.scale - 0.01).abs() < 1e-7);
        assert_eq!(q.zero_point, 0);
        assert_eq!(QuantParams::from_min_max(5.0, 5.0), QuantParams { scale: 1.0, zero_point: 0 });
        // Ranges that exclude zero are widened to include it.
        let q = QuantParams::from_min_max(2.0, 5.1);
        assert_eq!(q.zero_point, -128);
        assert!((q.scale - 0.02).abs() < 1e-7);
        assert_eq!(quantize_i8(0.0, q), -128);
    }

    /// Decodes binary16 bits by hand, independent of the conversion library.
    fn decode_binary16(bits: u16) -> f64 {
        let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = ((bits >> 10) & 0x1f) as i32;
        let frac = (bits & 0x3ff) as f64;
        match exp {
            0 => sign * frac * 2f64.powi(-24),
            31 if frac == 0.0 => sign * f64::INFINITY,
            31 => f64::NAN,
            e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
        }
    }

    #[test]
    fn f16_matches_exhaustive_nearest_search() {
        // All finite binary16 values, sorted, as an oracle table.
        let mut table: Vec<(f64, u16)> = (0..=u16::MAX)
            .filter(|b| (b >> 10) & 0x1f != 31)
            .map(|b| (decode_binary16(b), b))
            .collect();
        table.sort_by(|a, b| a.0.total_cmp(&b.0));
        let max = 65504.0f64;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let x: f32 = rng.random_range(-70000.0..70000.0) * if rng.random::<bool>() { 1.0 } else { 1e-4 };
            let got = cast_f32(cast_f16(x)) as f64;
            let xf = x as f64;
            if xf.abs() >= max + 16.0 {
                assert!(got.is_infinite());
                continue;
            }
            let pos = table.partition_point(|e| e.0 < xf);
            let mut best = f64::INFINITY;
            for p in pos.saturating_sub(2)..(pos + 2).min(table.len()) {
                best = best.min((table[p].0 - xf).abs());
            }
            assert!(((got - xf).abs() - best).abs() < 1e-12, "x={x} got={got} best_err={best}");
        }
    }

    proptest! {
        #[test]
        fn csr_dense_round_trip(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| if rng.random::<bool>() { 0.0 } else { rng.random_range(-2.0..2.0) })
                .collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            let csr = CsrMatrix::from_dense(&m);
            prop_assert!(csr.validate().is_ok());
            prop_assert_eq!(&csr.to_dense().unwrap(), &m);
            prop_assert_eq!(CsrMatrix::from_dense(&csr.to_dense().unwrap()), csr);
        }

        #[test]
        fn i8_round_trip_error_bounded(x in -100.0f32..100.0, scale in 0.01f32..2.0, zp in -20i32..20) {
            let q = QuantParams::new(scale, zp).unwrap();
            let (lo, hi) = q.range();
            let back = dequantize_i8(quantize_i8(x, q), q);
            prop_assert!((back - x.clamp(lo, hi)).abs() <= scale / 2.0 + 1e-5 * x.abs().max(1.0));
        }

        #[test]
        fn f16_exact_values_round_trip(bits in any::<u16>()) {
            let h = f16::from_bits(bits);
            prop_assume!(h.is_finite());
            prop_assert_eq!(cast_f16(cast_f32(h)).to_bits(), bits);
        }
    }
}
