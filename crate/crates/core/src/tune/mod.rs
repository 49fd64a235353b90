//! Per-layer random search over schedules, timed with an injectable
//! [`Timer`].

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{measure_with, Probe, ProbeLayer, Timer};
use crate::error::{Error, Result};
use crate::graph::{forward_activations, run_conv_layer, Layer, Model, ScheduleMap};
use crate::kernels::{Algorithm, Schedule, UNROLL_FACTORS};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    /// Maximum number of schedules measured per layer.
    pub budget: usize,
    /// Stop after this many consecutive schedules without a new best.
    pub early_stop: usize,
    /// Timed runs per schedule (a warm-up run comes on top).
    pub runs: usize,
    pub seed: u64,
    /// Upper bound on every tile size; a power of two.
    pub max_tile: usize,
    pub allow_parallel: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig { budget: 200, early_stop: 50, runs: 3, seed: 0, max_tile: 64, allow_parallel: true }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.early_stop == 0 || self.early_stop > self.budget {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= early_stop ({}) <= budget ({})",
                self.early_stop, self.budget
            )));
        }
        if self.runs < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 runs per schedule, got {}", self.runs)));
        }
        if !self.max_tile.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("max_tile {} is not a power of two", self.max_tile)));
        }
        Ok(())
    }
}

/// One measured schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TuneRecord {
    pub layer: usize,
    /// 1-based measurement order within the layer.
    pub variant: usize,
    pub schedule: Schedule,
    pub median_ns: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTuning {
    pub best: Schedule,
    pub best_ns: f64,
    pub trace: Vec<TuneRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelTuning {
    pub schedules: ScheduleMap,
    pub trace: Vec<TuneRecord>,
}

fn powers_up_to(limit: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |t| Some(t * 2)).take_while(|t| *t <= limit).collect()
}

/// The search space for a layer with `k` output channels and an
/// `h x w` output: the untuned default first, then every other schedule in
/// seeded random order. Tiles range over powers of two up to the next power
/// of two of the matching extent (capped by `max_tile`).
pub fn candidate_schedules(k: usize, h: usize, w: usize, algorithm: Algorithm, cfg: &TuneConfig, layer: usize) -> Vec<Schedule> {
    let bound = |extent: usize| powers_up_to(extent.next_power_of_two().min(cfg.max_tile));
    let parallel: &[bool] = if cfg.allow_parallel { &[false, true] } else { &[false] };
    let default = Schedule::untuned(algorithm);
    let mut rest = Vec::new();
    for &tile_oc in &bound(k) {
        for &tile_h in &bound(h) {
            for &tile_w in &bound(w) {
                for &unroll in &UNROLL_FACTORS {
                    for &par in parallel {
                        let s = Schedule { algorithm, tile_oc, tile_h, tile_w, unroll, parallel: par };
                        if s != default {
                            rest.push(s);
                        }
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rest.shuffle(&mut rng);
    std::iter::once(default).chain(rest).collect()
}

/// Searches schedules for convolution layer `layer`, timing it on `input`
/// (the activation it consumes). Returns the fastest schedule, ties going to
/// the one measured first.
pub fn tune_layer(
    model: &Model,
    layer: usize,
    input: &Tensor4,
    algorithm: Algorithm,
    cfg: &TuneConfig,
    timer: &mut dyn Timer,
) -> Result<LayerTuning> {
    cfg.validate()?;
    let conv = model.layers.get(layer).and_then(Layer::as_conv).ok_or_else(|| Error::layer(layer, "not a convolution"))?;
    let out = conv.spec.geom.output_shape(input.shape())?;
    let weights = if conv.spec.weights.is_sparse() { conv.spec.weights.nnz() } else { conv.spec.geom.k * conv.spec.geom.filter_len() };
    let macs = (weights * out.h * out.w) as u64;
    let candidates = candidate_schedules(out.c, out.h, out.w, algorithm, cfg, layer);

    let mut trace: Vec<TuneRecord> = Vec::new();
    let mut best: Option<(Schedule, f64)> = None;
    let mut since_improvement = 0;
    for (i, schedule) in candidates.into_iter().take(cfg.budget).enumerate() {
        schedule.validate()?;
        let probe_layer = [ProbeLayer { layer, schedule, macs }];
        let probe = Probe {
            label: "tune",
            technique: None,
            dtype: model.dtype,
            sparse: conv.spec.weights.is_sparse(),
            layers: &probe_layer,
            run: 0,
        };
        let m = measure_with(timer, probe, cfg.runs, || run_conv_layer(model, layer, input, &schedule).map(drop))?;
        trace.push(TuneRecord { layer, variant: i + 1, schedule, median_ns: m.median_ns });
        match best {
            Some((_, ns)) if m.median_ns >= ns => {
                since_improvement += 1;
                if since_improvement == cfg.early_stop {
                    break;
                }
            }
            _ => {
                best = Some((schedule, m.median_ns));
                since_improvement = 0;
            }
        }
    }
    let (best, best_ns) = best.ok_or_else(|| Error::Schedule("empty search space".into()))?;
    Ok(LayerTuning { best, best_ns, trace })
}

/// Tunes every convolution layer independently. Layer inputs are the
/// activations of a forward pass on `input` with untuned schedules.
pub fn tune_model(
    model: &Model,
    input: &Tensor4,
    algorithm: Algorithm,
    cfg: &TuneConfig,
    timer: &mut dyn Timer,
) -> Result<ModelTuning> {
    let mut activations = Vec::with_capacity(model.layers.len() + 1);
    forward_activations(model, input, &ScheduleMap::Shared(Schedule::untuned(algorithm)), |_, a| {
        activations.push(a.clone())
    })?;
    let mut schedules = Vec::with_capacity(model.conv_count());
    let mut trace = Vec::new();
    for (i, _) in model.conv_layers() {
        let t = tune_layer(model, i, &activations[i], algorithm, cfg, timer)?;
        schedules.push(t.best);
        trace.extend(t.trace);
    }
    Ok(ModelTuning { schedules: ScheduleMap::PerLayer(schedules), trace })
}

pub const TRACE_CSV_HEADER: &str = "layer,variant,algorithm,tile_oc,tile_h,tile_w,unroll,parallel,median_ns";

pub fn trace_csv(trace: &[TuneRecord]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in trace {
        let s = r.schedule;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.1}",
            r.layer, r.variant, s.algorithm, s.tile_oc, s.tile_h, s.tile_w, s.unroll, s.parallel, r.median_ns
        );
    }
    out
}
