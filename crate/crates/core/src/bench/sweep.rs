use std::fmt;

use crate::bench::curves::{emit_accuracy_curves, CurvePoint};
use crate::bench::{measure, Timer};
use crate::compress::{
    achieved_fraction, calibrate_i8, compression_ratio, expected_speedup, prune_channels_global_l1, prune_weights_global_l1,
    quantize_model_f16, quantize_model_i8, select_elbow, uncalibrated_params, Elbow, PruneKind, PruneLevel, PruneSchedule,
    Technique,
};
use crate::error::{Error, Result};
use crate::graph::{evaluate_top1, LabeledDataset, Model, ScheduleMap};
use crate::kernels::{Algorithm, Schedule};
use crate::tensor::DType;
use crate::tune::{tune_model, TuneConfig};

/// A technique in the sweep grid; prune levels are chosen during the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TechniqueKind {
    Dense,
    WeightPrune,
    ChannelPrune,
    F16,
    I8Calibrated,
    I8Uncalibrated,
}

impl TechniqueKind {
    pub const ALL: [TechniqueKind; 6] = [
        TechniqueKind::Dense,
        TechniqueKind::WeightPrune,
        TechniqueKind::ChannelPrune,
        TechniqueKind::F16,
        TechniqueKind::I8Calibrated,
        TechniqueKind::I8Uncalibrated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TechniqueKind::Dense => "dense",
            TechniqueKind::WeightPrune => "weight-prune",
            TechniqueKind::ChannelPrune => "channel-prune",
            TechniqueKind::F16 => "f16",
            TechniqueKind::I8Calibrated => "i8-calibrated",
            TechniqueKind::I8Uncalibrated => "i8-uncalibrated",
        }
    }
}

impl fmt::Display for TechniqueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TechniqueKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TechniqueKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = TechniqueKind::ALL.iter().map(|k| k.name()).collect();
            Error::InvalidArgument(format!("unknown technique {s:?} (one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub techniques: Vec<TechniqueKind>,
    pub algorithms: Vec<Algorithm>,
    pub tuned: Vec<bool>,
    /// Timed runs per cell, warm-up excluded.
    pub runs: usize,
    pub tune: TuneConfig,
    /// Allowed top-1 drop when picking prune levels.
    pub drop_threshold: f64,
    pub weight_schedule: PruneSchedule,
    pub channel_schedule: PruneSchedule,
    /// Fixed prune levels; when unset the elbow of the schedule's curve is used.
    pub weight_level: Option<PruneLevel>,
    pub channel_level: Option<PruneLevel>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            techniques: TechniqueKind::ALL.to_vec(),
            algorithms: Algorithm::ALL.to_vec(),
            tuned: vec![false, true],
            runs: 150,
            tune: TuneConfig::default(),
            drop_threshold: 0.02,
            weight_schedule: PruneSchedule::weight_default(),
            channel_schedule: PruneSchedule::channel_default(),
            weight_level: None,
            channel_level: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.techniques.is_empty() || self.algorithms.is_empty() || self.tuned.is_empty() {
            return Err(Error::InvalidArgument("sweep grid has an empty axis".into()));
        }
        if self.runs < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 timed runs, got {}", self.runs)));
        }
        if !(0.0..=1.0).contains(&self.drop_threshold) {
            return Err(Error::InvalidArgument(format!("drop threshold {} outside [0, 1]", self.drop_threshold)));
        }
        if self.tuned.contains(&true) {
            self.tune.validate()?;
        }
        Ok(())
    }
}

/// One benchmarked cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub variant: String,
    pub technique: Technique,
    pub algorithm: Algorithm,
    pub tuned: bool,
    pub median_ns: f64,
    pub runs: usize,
    pub compression_ratio: f64,
    pub expected_speedup: f64,
    pub achieved_fraction: f64,
    pub top1: f64,
    /// Best dense latency at the same tuning state; the speedup reference.
    pub baseline_ns: f64,
    pub min_ns: u64,
    pub max_ns: u64,
    pub iqr_ns: u64,
}

impl BenchRecord {
    pub fn speedup(&self) -> f64 {
        self.baseline_ns / self.median_ns
    }
}

/// A cell that could not be benchmarked.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCell {
    pub variant: String,
    pub technique: String,
    pub algorithm: Algorithm,
    pub tuned: bool,
    pub reason: String,
}

/// The chosen prune level of one technique.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChosenLevel {
    pub kind: PruneKind,
    pub level: PruneLevel,
    /// `None` when the level was fixed by configuration.
    pub elbow: Option<Elbow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub model: String,
    pub baseline_top1: f64,
    pub records: Vec<BenchRecord>,
    pub errors: Vec<ErrorCell>,
    pub curves: Vec<CurvePoint>,
    pub levels: Vec<ChosenLevel>,
    pub drop_threshold: f64,
}

struct Variant {
    technique: Technique,
    name: String,
    built: std::result::Result<(Model, f64, f64), String>,
}

fn choose_level(
    kind: PruneKind,
    fixed: Option<PruneLevel>,
    schedule: &PruneSchedule,
    base: &Model,
    test: &LabeledDataset,
    eval: &ScheduleMap,
    drop: f64,
    curves: &mut Vec<CurvePoint>,
) -> Result<ChosenLevel> {
    if let Some(level) = fixed {
        return Ok(ChosenLevel { kind, level, elbow: None });
    }
    let points = emit_accuracy_curves(std::slice::from_ref(schedule), base, test, eval)?;
    let baseline = points[0].accuracy;
    let curve: Vec<(f64, f64)> = points[1..].iter().map(|p| (p.level, p.accuracy)).collect();
    let elbow = select_elbow(&curve, baseline, drop)?;
    curves.extend(points);
    Ok(ChosenLevel { kind, level: schedule.levels[elbow.index], elbow: Some(elbow) })
}

/// Builds each compressed variant of `base` and benchmarks it for every
/// algorithm and tuning state. Prune levels come from the elbow of each
/// schedule's accuracy curve on `test` unless fixed in `cfg`; int8
/// calibration uses `calibration`. A failing cell is recorded in
/// [`SweepReport::errors`] and the sweep carries on.
pub fn run_sweep(
    base: &Model,
    calibration: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &SweepConfig,
    timer: &mut dyn Timer,
) -> Result<SweepReport> {
    cfg.validate()?;
    if base.dtype != DType::F32 || base.is_sparse() {
        return Err(Error::InvalidArgument("the sweep starts from a dense f32 model".into()));
    }
    let input = test.inputs.first().ok_or_else(|| Error::InvalidArgument("empty test set".into()))?;
    let eval = ScheduleMap::Shared(Schedule::untuned(Algorithm::Gemm));
    let baseline_top1 = evaluate_top1(base, test, &eval)?;

    let mut curves = Vec::new();
    let mut levels = Vec::new();
    let mut variants = Vec::new();
    for &kind in &cfg.techniques {
        let (technique, model) = match kind {
            TechniqueKind::Dense => (Technique::Dense, Ok(base.clone())),
            TechniqueKind::WeightPrune => {
                let c = choose_level(
                    PruneKind::Weight,
                    cfg.weight_level,
                    &cfg.weight_schedule,
                    base,
                    test,
                    &eval,
                    cfg.drop_threshold,
                    &mut curves,
                )?;
                levels.push(c);
                (Technique::WeightPrune(c.level), prune_weights_global_l1(base, c.level).map(|r| r.model.to_sparse()))
            }
            TechniqueKind::ChannelPrune => {
                let c = choose_level(
                    PruneKind::Channel,
                    cfg.channel_level,
                    &cfg.channel_schedule,
                    base,
                    test,
                    &eval,
                    cfg.drop_threshold,
                    &mut curves,
                )?;
                levels.push(c);
                (Technique::ChannelPrune(c.level), prune_channels_global_l1(base, c.level).map(|r| r.model))
            }
            TechniqueKind::F16 => (Technique::F16, quantize_model_f16(base)),
            TechniqueKind::I8Calibrated => {
                (Technique::I8Calibrated, calibrate_i8(base, calibration).and_then(|p| quantize_model_i8(base, &p)))
            }
            TechniqueKind::I8Uncalibrated => (Technique::I8Uncalibrated, quantize_model_i8(base, &uncalibrated_params(base))),
        };
        let name = match technique.level() {
            Some(l) => format!("{}/{}-{l}", base.name, technique.name()),
            None => format!("{}/{}", base.name, technique.name()),
        };
        let built = model
            .and_then(|mut m| {
                m.name = name.clone();
                let acc = evaluate_top1(&m, test, &eval)?;
                let ratio = compression_ratio(base, &m);
                Ok((m, acc, ratio))
            })
            .map_err(|e| e.to_string());
        variants.push(Variant { technique, name, built });
    }

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for v in &variants {
        for &algorithm in &cfg.algorithms {
            for &tuned in &cfg.tuned {
                let fail = |reason: String| ErrorCell {
                    variant: v.name.clone(),
                    technique: v.technique.to_string(),
                    algorithm,
                    tuned,
                    reason,
                };
                let (model, top1, ratio) = match &v.built {
                    Ok(b) => b,
                    Err(reason) => {
                        errors.push(fail(reason.clone()));
                        continue;
                    }
                };
                let timed = cell_latency(model, input, algorithm, tuned, cfg, timer, Some(v.technique));
                match timed {
                    Ok(m) => records.push(BenchRecord {
                        variant: v.name.clone(),
                        technique: v.technique,
                        algorithm,
                        tuned,
                        median_ns: m.median_ns,
                        runs: m.runs(),
                        compression_ratio: *ratio,
                        expected_speedup: expected_speedup(v.technique),
                        achieved_fraction: f64::NAN,
                        top1: *top1,
                        baseline_ns: f64::NAN,
                        min_ns: m.min_ns(),
                        max_ns: m.max_ns(),
                        iqr_ns: m.iqr_ns(),
                    }),
                    Err(e) => errors.push(fail(e.to_string())),
                }
            }
        }
    }

    for &tuned in &cfg.tuned {
        let from_grid = records
            .iter()
            .filter(|r| r.technique == Technique::Dense && r.tuned == tuned)
            .map(|r| r.median_ns)
            .reduce(f64::min);
        let baseline = match from_grid {
            Some(b) => b,
            None => {
                let mut best: Option<f64> = None;
                for &algorithm in &cfg.algorithms {
                    if let Ok(m) = cell_latency(base, input, algorithm, tuned, cfg, timer, Some(Technique::Dense)) {
                        best = Some(best.map_or(m.median_ns, |b| b.min(m.median_ns)));
                    }
                }
                best.ok_or_else(|| Error::Unsupported("the dense baseline failed for every algorithm".into()))?
            }
        };
        for r in records.iter_mut().filter(|r| r.tuned == tuned) {
            r.baseline_ns = baseline;
            r.achieved_fraction = achieved_fraction(baseline, r.median_ns, r.technique)?;
        }
    }

    Ok(SweepReport {
        model: base.name.clone(),
        baseline_top1,
        records,
        errors,
        curves,
        levels,
        drop_threshold: cfg.drop_threshold,
    })
}

fn cell_latency(
    model: &Model,
    input: &crate::tensor::Tensor4,
    algorithm: Algorithm,
    tuned: bool,
    cfg: &SweepConfig,
    timer: &mut dyn Timer,
    technique: Option<Technique>,
) -> Result<crate::bench::Measurement> {
    let schedules = if tuned {
        tune_model(model, input, algorithm, &cfg.tune, timer)?.schedules
    } else {
        ScheduleMap::Shared(Schedule::untuned(algorithm))
    };
    measure(model, &schedules, input, cfg.runs, timer, technique)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{CostModelTimer, FnTimer, Probe};
    use crate::graph::{generate_toy_workload, WorkloadConfig};

    fn workload() -> (Model, LabeledDataset, LabeledDataset) {
        generate_toy_workload(&WorkloadConfig { train: 20, test: 30, ..WorkloadConfig::default() }).unwrap()
    }

    fn quick() -> SweepConfig {
        SweepConfig {
            runs: 2,
            tune: TuneConfig { budget: 6, early_stop: 3, ..TuneConfig::default() },
            weight_level: Some(PruneLevel::from_fraction(0.9).unwrap()),
            channel_level: Some(PruneLevel::from_fraction(0.25).unwrap()),
            ..SweepConfig::default()
        }
    }

    #[test]
    fn single_cell() {
        let (m, train, test) = workload();
        let cfg = SweepConfig {
            techniques: vec![TechniqueKind::F16],
            algorithms: vec![Algorithm::Direct],
            tuned: vec![false],
            ..quick()
        };
        let r = run_sweep(&m, &train, &test, &cfg, &mut CostModelTimer::default()).unwrap();
        assert_eq!(r.records.len(), 1);
        let rec = &r.records[0];
        assert_eq!(rec.compression_ratio, 0.5);
        assert_eq!(rec.expected_speedup, 2.0);
        assert!(rec.baseline_ns > 0.0);
    }

    #[test]
    fn full_grid_counts_and_consistency() {
        let (m, train, test) = workload();
        let cfg = quick();
        let r = run_sweep(&m, &train, &test, &cfg, &mut CostModelTimer::default()).unwrap();
        assert_eq!(r.records.len() + r.errors.len(), 6 * 3 * 2);
        assert!(r.errors.is_empty(), "{:?}", r.errors);
        for rec in &r.records {
            let again = achieved_fraction(rec.baseline_ns, rec.median_ns, rec.technique).unwrap();
            assert_eq!(rec.achieved_fraction, again);
            assert_eq!(rec.runs, cfg.runs);
            assert!(rec.median_ns > 0.0);
        }
        // The cost model rewards tuning, and the tuner always tries the default.
        for untuned in r.records.iter().filter(|r| !r.tuned) {
            let tuned = r
                .records
                .iter()
                .find(|t| t.tuned && t.technique == untuned.technique && t.algorithm == untuned.algorithm)
                .unwrap();
            assert!(tuned.median_ns <= untuned.median_ns);
        }
    }

    #[test]
    fn failing_cells_are_recorded() {
        let (m, train, test) = workload();
        let cfg = SweepConfig {
            techniques: vec![TechniqueKind::Dense, TechniqueKind::I8Calibrated],
            tuned: vec![false],
            ..quick()
        };
        // Fail every int8 measurement.
        let mut t = FnTimer(|p: &Probe<'_>| if p.dtype == DType::I8 { 0 } else { 10 });
        let r = run_sweep(&m, &train, &test, &cfg, &mut t).unwrap();
        assert_eq!(r.records.len(), 3);
        assert_eq!(r.errors.len(), 3);
        assert!(r.errors.iter().all(|e| e.technique == "i8-calibrated"));
    }

    #[test]
    fn elbow_levels_are_picked() {
        let (m, train, test) = workload();
        let cfg = SweepConfig {
            techniques: vec![TechniqueKind::WeightPrune],
            algorithms: vec![Algorithm::Gemm],
            tuned: vec![false],
            weight_level: None,
            ..quick()
        };
        let r = run_sweep(&m, &train, &test, &cfg, &mut CostModelTimer::default()).unwrap();
        assert_eq!(r.levels.len(), 1);
        assert!(r.levels[0].elbow.is_some());
        assert_eq!(r.curves.len(), 8);
        // No dense cell in the grid: the baseline is measured separately.
        assert!(r.records[0].baseline_ns > 0.0);
    }
}
