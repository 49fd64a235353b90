//! Seeded problems shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convstack_core::kernels::{ConvGeometry, ConvSpec};
use convstack_core::tensor::{Shape4, Tensor4};

/// A single-image convolution problem.
pub struct Problem {
    pub name: String,
    pub input: Tensor4,
    pub spec: ConvSpec,
}

/// ResNet-ish layer shapes scaled down to run in milliseconds.
pub const LAYERS: [(usize, usize, usize, usize, usize, usize); 3] = [
    // (k, c, hw, r, stride, pad)
    (16, 3, 32, 3, 1, 1),
    (32, 16, 16, 3, 1, 1),
    (64, 32, 8, 1, 1, 0),
];

pub fn problem(k: usize, c: usize, hw: usize, r: usize, stride: usize, pad: usize, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = ConvGeometry::new(k, c, r, r, stride, pad).expect("valid geometry");
    let weights = (0..k * geom.filter_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias = Some((0..k).map(|_| rng.random_range(-0.1..0.1)).collect());
    let spec = ConvSpec::dense(geom, weights, bias).expect("sized");
    let shape = Shape4::new(1, c, hw, hw).expect("positive");
    let input = Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0));
    Problem { name: format!("k{k}c{c}_{hw}x{hw}_r{r}"), input, spec }
}

pub fn problems() -> Vec<Problem> {
    LAYERS.iter().enumerate().map(|(i, &(k, c, hw, r, s, p))| problem(k, c, hw, r, s, p, i as u64)).collect()
}

/// Zeroes the `fraction` of weights with the smallest magnitude.
pub fn magnitude_prune(spec: &ConvSpec, fraction: f64) -> ConvSpec {
    let mut w = spec.weights.to_dense_f32();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
    for &i in &order[..(fraction * w.len() as f64) as usize] {
        w[i] = 0.0;
    }
    ConvSpec::dense(spec.geom, w, spec.bias.clone()).expect("same geometry")
}
