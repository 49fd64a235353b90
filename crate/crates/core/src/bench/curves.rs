use std::fmt::Write as _;

use crate::compress::{compression_ratio, prune_channels_global_l1, prune_weights_global_l1, PruneKind, PruneSchedule};
use crate::error::Result;
use crate::graph::{evaluate_top1, LabeledDataset, Model, ScheduleMap};

pub const CURVE_CSV_HEADER: &str = "technique,level,compression,accuracy";

/// One point of an accuracy/compression trade-off curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub kind: PruneKind,
    /// Prune fraction; 0 for the unpruned baseline.
    pub level: f64,
    pub compression: f64,
    pub accuracy: f64,
}

impl CurvePoint {
    pub fn technique(&self) -> &'static str {
        match self.kind {
            PruneKind::Weight => "weight-prune",
            PruneKind::Channel => "channel-prune",
        }
    }
}

/// Evaluates `model` pruned at every level of every schedule, each level
/// applied to the unpruned model. Each schedule's points start with a
/// level-0 baseline row.
pub fn emit_accuracy_curves(
    schedules: &[PruneSchedule],
    model: &Model,
    dataset: &LabeledDataset,
    eval: &ScheduleMap,
) -> Result<Vec<CurvePoint>> {
    let baseline = evaluate_top1(model, dataset, eval)?;
    let mut points = Vec::new();
    for schedule in schedules {
        points.push(CurvePoint { kind: schedule.kind, level: 0.0, compression: 0.0, accuracy: baseline });
        for &level in &schedule.levels {
            let pruned = match schedule.kind {
                PruneKind::Weight => prune_weights_global_l1(model, level)?.model.to_sparse(),
                PruneKind::Channel => prune_channels_global_l1(model, level)?.model,
            };
            points.push(CurvePoint {
                kind: schedule.kind,
                level: level.fraction(),
                compression: compression_ratio(model, &pruned),
                accuracy: evaluate_top1(&pruned, dataset, eval)?,
            });
        }
    }
    Ok(points)
}

pub fn accuracy_curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", p.technique(), p.level, p.compression, p.accuracy);
    }
    out
}
