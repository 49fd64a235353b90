//! Synthetic classification workload with a hand-constructed model.
//!
//! Every class owns a disjoint set of cells, one cell being a 2x2 pixel block
//! of one input channel, and its template is a positive pattern over those
//! cells. The model is two convolutions:
//!
//! * a 3x3 convolution whose main channels copy an input channel through the
//!   centre tap at a random gain (several copies per input channel), plus a
//!   few weak channels carrying only small filler taps;
//! * after ReLU and 2x2 max pooling, a convolution covering the whole pooled
//!   map whose filters are the class templates spread over the copies, so it
//!   acts as a matched filter.
//!
//! ReLU, global average pooling (of a 1x1 map) and softmax close the head.
//! Small random filler weights everywhere else give magnitude pruning
//! something to remove before it reaches the informative weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{LabeledDataset, Layer, Model};
use crate::kernels::{ConvGeometry, ConvSpec};
use crate::tensor::{Shape4, Tensor4};

const IN_CHANNELS: usize = 3;
const COPIES: usize = 3;
const WEAK_CHANNELS: usize = 3;
/// Template values are drawn from this range, then rescaled per class to a
/// common L1 norm.
const TEMPLATE_RANGE: (f32, f32) = (0.05, 0.35);
const GAIN_RANGE: (f32, f32) = (0.5, 1.5);
const FILLER_FIRST: f32 = 0.02;
/// Filler in the matched filter, relative to a typical template weight.
const FILLER_SECOND: f32 = 0.03;
/// Mean noise-free score of the true class. Kept well above 4 so a fixed
/// [-4, 4] activation range clips the scores.
const TARGET_SCORE: f32 = 12.0;

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadConfig {
    pub classes: usize,
    /// Image height and width; must be even.
    pub size: usize,
    /// Standard deviation of the additive Gaussian noise, in `[0, 1)`.
    pub noise: f32,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig { classes: 10, size: 16, noise: 0.3, train: 200, test: 200, seed: 7 }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::InvalidArgument(format!("noise {} outside [0, 1)", self.noise)));
        }
        if self.size < 2 || !self.size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("image size {} must be even and at least 2", self.size)));
        }
        let cells = IN_CHANNELS * (self.size / 2) * (self.size / 2);
        if cells < self.classes {
            return Err(Error::InvalidArgument(format!(
                "a {0}x{0} image has {cells} template cells, fewer than {1} classes",
                self.size, self.classes
            )));
        }
        Ok(())
    }
}

struct Templates {
    /// Per class, `(channel, pooled y, pooled x, value)` cells.
    cells: Vec<Vec<(usize, usize, usize, f32)>>,
}

impl Templates {
    fn draw(cfg: &WorkloadConfig, rng: &mut ChaCha8Rng) -> Templates {
        let half = cfg.size / 2;
        let mut all: Vec<(usize, usize, usize)> =
            (0..IN_CHANNELS).flat_map(|c| (0..half).flat_map(move |y| (0..half).map(move |x| (c, y, x)))).collect();
        all.shuffle(rng);
        let per_class = all.len() / cfg.classes;
        let target_l1 = per_class as f32 * (TEMPLATE_RANGE.0 + TEMPLATE_RANGE.1) / 2.0;
        let cells = all
            .chunks_exact(per_class)
            .take(cfg.classes)
            .map(|chunk| {
                let raw: Vec<f32> = chunk.iter().map(|_| rng.random_range(TEMPLATE_RANGE.0..TEMPLATE_RANGE.1)).collect();
                let norm = target_l1 / raw.iter().sum::<f32>();
                chunk.iter().zip(raw).map(|(&(c, y, x), v)| (c, y, x, v * norm)).collect()
            })
            .collect();
        Templates { cells }
    }

    fn image(&self, class: usize, size: usize) -> Tensor4 {
        let mut t = Tensor4::zeros(Shape4 { n: 1, c: IN_CHANNELS, h: size, w: size });
        for &(c, y, x, v) in &self.cells[class] {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                t.set(0, c, 2 * y + dy, 2 * x + dx, v);
            }
        }
        t
    }
}

fn build_model(cfg: &WorkloadConfig, templates: &Templates, rng: &mut ChaCha8Rng) -> Result<Model> {
    let hidden = IN_CHANNELS * COPIES + WEAK_CHANNELS;
    let first = ConvGeometry::new(hidden, IN_CHANNELS, 3, 3, 1, 1)?;
    let mut w0: Vec<f32> = (0..hidden * first.filter_len()).map(|_| rng.random_range(-FILLER_FIRST..FILLER_FIRST)).collect();
    let mut gains = Vec::with_capacity(IN_CHANNELS * COPIES);
    for h in 0..IN_CHANNELS * COPIES {
        let g = rng.random_range(GAIN_RANGE.0..GAIN_RANGE.1);
        w0[h * first.filter_len() + first.tap_index(h / COPIES, 1, 1)] = g;
        gains.push(g);
    }

    let half = cfg.size / 2;
    let second = ConvGeometry::new(cfg.classes, hidden, half, half, 1, 0)?;
    let mean_energy =
        templates.cells.iter().map(|cells| cells.iter().map(|c| c.3 * c.3).sum::<f32>()).sum::<f32>() / cfg.classes as f32;
    let scale = TARGET_SCORE / mean_energy;
    let typical = scale * (TEMPLATE_RANGE.0 + TEMPLATE_RANGE.1) / 2.0 / COPIES as f32;
    let filler = FILLER_SECOND * typical;
    let mut w2: Vec<f32> = (0..cfg.classes * second.filter_len()).map(|_| rng.random_range(-filler..filler)).collect();
    for (k, cells) in templates.cells.iter().enumerate() {
        for &(c, y, x, v) in cells {
            for copy in 0..COPIES {
                let h = c * COPIES + copy;
                w2[k * second.filter_len() + second.tap_index(h, y, x)] = scale * v / (COPIES as f32 * gains[h]);
            }
        }
    }

    Model::new(
        format!("toy-{}c-{}px", cfg.classes, cfg.size),
        Shape4::new(1, IN_CHANNELS, cfg.size, cfg.size)?,
        cfg.classes,
        vec![
            Layer::conv(ConvSpec::dense(first, w0, Some(vec![0.0; hidden]))?),
            Layer::Relu,
            Layer::MaxPool2d { window: 2, stride: 2 },
            Layer::conv(ConvSpec::dense(second, w2, Some(vec![0.0; cfg.classes]))?),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Softmax,
        ],
    )
}

fn draw_dataset(cfg: &WorkloadConfig, templates: &Templates, count: usize, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % cfg.classes;
        let mut x = templates.image(label, cfg.size);
        for v in x.data_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v += cfg.noise * z;
        }
        inputs.push(x);
        labels.push(label);
    }
    LabeledDataset::new(inputs, labels, cfg.classes, cfg.seed)
}

/// Builds the toy model and its train and test sets. Fully determined by
/// `cfg`; labels cycle through the classes so both sets are balanced.
pub fn generate_toy_workload(cfg: &WorkloadConfig) -> Result<(Model, LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates = Templates::draw(cfg, &mut rng);
    let model = build_model(cfg, &templates, &mut rng)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let train = draw_dataset(cfg, &templates, cfg.train, &mut data_rng)?;
    let test = draw_dataset(cfg, &templates, cfg.test, &mut data_rng)?;
    Ok((model, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{evaluate_top1, ScheduleMap};
    use crate::kernels::{Algorithm, Schedule};

    fn direct() -> ScheduleMap {
        ScheduleMap::Shared(Schedule::untuned(Algorithm::Direct))
    }

    #[test]
    fn noiseless_is_perfect() {
        let cfg = WorkloadConfig { noise: 0.0, train: 10, test: 40, ..WorkloadConfig::default() };
        let (model, _, test) = generate_toy_workload(&cfg).unwrap();
        assert_eq!(evaluate_top1(&model, &test, &direct()).unwrap(), 1.0);
    }

    #[test]
    fn deterministic() {
        let cfg = WorkloadConfig { train: 5, test: 5, ..WorkloadConfig::default() };
        assert_eq!(generate_toy_workload(&cfg).unwrap(), generate_toy_workload(&cfg).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            WorkloadConfig { classes: 1, ..WorkloadConfig::default() },
            WorkloadConfig { noise: 1.0, ..WorkloadConfig::default() },
            WorkloadConfig { size: 7, ..WorkloadConfig::default() },
            WorkloadConfig { size: 2, classes: 4, ..WorkloadConfig::default() },
        ] {
            assert!(generate_toy_workload(&cfg).is_err(), "{cfg:?}");
        }
    }
}
