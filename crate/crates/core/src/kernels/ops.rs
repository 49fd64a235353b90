use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub fn relu(t: &Tensor4) -> Tensor4 {
    t.map(|v| v.max(0.0))
}

/// Max pooling with `h_out = (h - window) / stride + 1`; the division must be
/// exact.
pub fn maxpool2d(t: &Tensor4, window: usize, stride: usize) -> Result<Tensor4> {
    let s = t.shape();
    let (ho, wo) = pool_output_hw(s.h, s.w, window, stride)?;
    let out_shape = Shape4::new(s.n, s.c, ho, wo)?;
    Ok(Tensor4::from_fn(out_shape, |n, c, y, x| {
        let mut m = f32::NEG_INFINITY;
        for i in 0..window {
            for j in 0..window {
                m = m.max(t.get(n, c, y * stride + i, x * stride + j));
            }
        }
        m
    }))
}

pub fn pool_output_hw(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::Shape("pooling window and stride must be positive".into()));
    }
    let dim = |extent: usize| {
        if extent < window || !(extent - window).is_multiple_of(stride) {
            Err(Error::Shape(format!("non-integral pooling output: ({extent} - {window}) / {stride}")))
        } else {
            Ok((extent - window) / stride + 1)
        }
    };
    Ok((dim(h)?, dim(w)?))
}

/// Averages each channel plane down to a single value.
pub fn global_avg_pool(t: &Tensor4) -> Tensor4 {
    let s = t.shape();
    let plane = s.h * s.w;
    let data = t.data().chunks(plane).map(|ch| ch.iter().sum::<f32>() / plane as f32).collect();
    Tensor4::new(Shape4 { n: s.n, c: s.c, h: 1, w: 1 }, data).expect("one value per channel")
}

/// `out = W v + b` for a row-major `out_features x in_features` weight.
pub fn dense_layer(v: &[f32], weights: &[f32], bias: Option<&[f32]>) -> Result<Vec<f32>> {
    if v.is_empty() || !weights.len().is_multiple_of(v.len()) {
        return Err(Error::Shape(format!("{} weights cannot multiply a {}-vector", weights.len(), v.len())));
    }
    let out_features = weights.len() / v.len();
    if let Some(b) = bias {
        if b.len() != out_features {
            return Err(Error::Shape(format!("bias has {} entries, expected {out_features}", b.len())));
        }
    }
    Ok(weights
        .chunks(v.len())
        .enumerate()
        .map(|(o, row)| {
            let dot = row.iter().zip(v).fold(0.0f32, |acc, (&w, &x)| acc + w * x);
            dot + bias.map_or(0.0, |b| b[o])
        })
        .collect())
}

/// Index of the largest score; ties go to the lowest index and NaNs never win.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] || (v[best].is_nan() && !x.is_nan()) {
            best = i;
        }
    }
    best
}

pub fn softmax(v: &[f32]) -> Vec<f32> {
    let m = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = v.iter().map(|&x| ((x - m) as f64).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|&x| (x / sum) as f32).collect()
}
