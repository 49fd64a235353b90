//! Model compression passes (magnitude pruning, channel pruning, float16
//! and int8 quantization) and the accounting used to compare them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DType;

mod accounting;
mod prune;
mod quant;

pub use accounting::{compression_ratio, count_macs, count_params, stored_bytes, CompressionResult};
pub use prune::{
    compact_channels, mask_channels, prune_channels_global_l1, prune_weights_global_l1, ChannelPruneResult,
    RemovedChannels, WeightPruneResult,
};
pub use quant::{
    calibrate_i8, quantize_model_f16, quantize_model_i8, uncalibrated_params, UNCALIBRATED_RANGE,
};

/// A prune fraction in `(0, 1)`, held in parts per million so that counts
/// like `floor(f * P)` are computed in exact integer arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PruneLevel(u32);

impl PruneLevel {
    pub const SCALE: u32 = 1_000_000;

    pub fn from_ppm(ppm: u32) -> Result<Self> {
        if ppm == 0 || ppm >= Self::SCALE {
            return Err(Error::InvalidArgument(format!(
                "prune fraction {} outside (0, 1)",
                ppm as f64 / Self::SCALE as f64
            )));
        }
        Ok(PruneLevel(ppm))
    }

    /// Rounds `f` to the nearest part per million.
    pub fn from_fraction(f: f64) -> Result<Self> {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidArgument(format!("prune fraction {f} outside (0, 1)")));
        }
        Self::from_ppm((f * Self::SCALE as f64).round() as u32)
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn fraction(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    /// `floor(fraction * total)`.
    pub fn count_of(self, total: usize) -> usize {
        (total as u128 * self.0 as u128 / Self::SCALE as u128) as usize
    }
}

impl fmt::Display for PruneLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.fraction())
    }
}

impl std::str::FromStr for PruneLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let f: f64 = s.trim().parse().map_err(|_| Error::InvalidArgument(format!("not a fraction: {s:?}")))?;
        PruneLevel::from_fraction(f)
    }
}

impl Serialize for PruneLevel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.fraction())
    }
}

impl<'de> Deserialize<'de> for PruneLevel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        PruneLevel::from_fraction(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneKind {
    Weight,
    Channel,
}

impl PruneKind {
    pub fn name(self) -> &'static str {
        match self {
            PruneKind::Weight => "weight",
            PruneKind::Channel => "channel",
        }
    }
}

impl std::str::FromStr for PruneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(PruneKind::Weight),
            "channel" => Ok(PruneKind::Channel),
            _ => Err(Error::InvalidArgument(format!("unknown pruning technique {s:?} (weight, channel)"))),
        }
    }
}

/// Increasing prune levels applied one after another to the same base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub kind: PruneKind,
    pub levels: Vec<PruneLevel>,
}

impl PruneSchedule {
    pub fn new(kind: PruneKind, levels: Vec<PruneLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("empty prune schedule".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("prune levels must be strictly increasing".into()));
        }
        Ok(PruneSchedule { kind, levels })
    }

    /// 50% to 90% in steps of 10, then 95% and 99%.
    pub fn weight_default() -> Self {
        let ppm = [500_000, 600_000, 700_000, 800_000, 900_000, 950_000, 990_000];
        Self::from_ppm(PruneKind::Weight, &ppm)
    }

    /// 5% to 95% in steps of 5, then 99%.
    pub fn channel_default() -> Self {
        let ppm: Vec<u32> = (1..=19).map(|i| i * 50_000).chain([990_000]).collect();
        Self::from_ppm(PruneKind::Channel, &ppm)
    }

    pub fn default_for(kind: PruneKind) -> Self {
        match kind {
            PruneKind::Weight => Self::weight_default(),
            PruneKind::Channel => Self::channel_default(),
        }
    }

    fn from_ppm(kind: PruneKind, ppm: &[u32]) -> Self {
        let levels = ppm.iter().map(|&p| PruneLevel::from_ppm(p).expect("constant in range")).collect();
        PruneSchedule::new(kind, levels).expect("constant schedule is increasing")
    }
}

/// A compression technique as benchmarked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Technique {
    Dense,
    WeightPrune(PruneLevel),
    ChannelPrune(PruneLevel),
    F16,
    I8Calibrated,
    I8Uncalibrated,
}

impl Technique {
    /// Label used in CSV output.
    pub fn name(&self) -> &'static str {
        match self {
            Technique::Dense => "dense",
            Technique::WeightPrune(_) => "weight-prune",
            Technique::ChannelPrune(_) => "channel-prune",
            Technique::F16 => "f16",
            Technique::I8Calibrated => "i8-calibrated",
            Technique::I8Uncalibrated => "i8-uncalibrated",
        }
    }

    /// Short label used in summary tables.
    pub fn short(&self) -> &'static str {
        match self {
            Technique::Dense => "Dense",
            Technique::WeightPrune(_) => "WP",
            Technique::ChannelPrune(_) => "CP",
            Technique::F16 => "F16",
            Technique::I8Calibrated => "I8",
            Technique::I8Uncalibrated => "I8-uncal",
        }
    }

    pub fn level(&self) -> Option<PruneLevel> {
        match self {
            Technique::WeightPrune(l) | Technique::ChannelPrune(l) => Some(*l),
            _ => None,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Technique::F16 => DType::F16,
            Technique::I8Calibrated | Technique::I8Uncalibrated => DType::I8,
            _ => DType::F32,
        }
    }

    /// Whether the compressed model runs on the sparse kernels.
    pub fn is_sparse(&self) -> bool {
        matches!(self, Technique::WeightPrune(_))
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level() {
            Some(l) => write!(f, "{} {l}", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Ideal speedup over dense f32: `1 / (1 - f)` for pruning at fraction `f`,
/// 2 for float16, 4 for int8, 1 for the dense baseline.
pub fn expected_speedup(t: Technique) -> f64 {
    match t {
        Technique::Dense => 1.0,
        Technique::WeightPrune(l) | Technique::ChannelPrune(l) => {
            PruneLevel::SCALE as f64 / (PruneLevel::SCALE - l.ppm()) as f64
        }
        Technique::F16 => 2.0,
        Technique::I8Calibrated | Technique::I8Uncalibrated => 4.0,
    }
}

/// Share of the ideal speedup actually obtained:
/// `(baseline / latency) / expected_speedup(t)`.
pub fn achieved_fraction(baseline_latency: f64, latency: f64, t: Technique) -> Result<f64> {
    if !(baseline_latency > 0.0 && latency > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "latencies must be positive, got baseline {baseline_latency} and {latency}"
        )));
    }
    Ok(baseline_latency / latency / expected_speedup(t))
}

/// The chosen point of an accuracy/compression curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Elbow {
    pub index: usize,
    pub compression: f64,
    pub accuracy: f64,
    /// No point stayed within the threshold; the least compressed one was
    /// returned instead.
    pub flagged: bool,
}

/// Picks the most compressed point whose accuracy is at least
/// `baseline - drop_threshold`, or the least compressed point (flagged) when
/// none qualifies.
pub fn select_elbow(curve: &[(f64, f64)], baseline: f64, drop_threshold: f64) -> Result<Elbow> {
    if curve.is_empty() {
        return Err(Error::InvalidArgument("empty accuracy curve".into()));
    }
    if curve.windows(2).any(|w| !(w[0].0 < w[1].0)) {
        return Err(Error::InvalidArgument("curve compressions must be strictly increasing".into()));
    }
    // The small slack keeps e.g. 0.93 - 0.02 from excluding an accuracy of 0.91.
    let floor = baseline - drop_threshold - 1e-12;
    let pick = |index: usize, flagged| Elbow { index, compression: curve[index].0, accuracy: curve[index].1, flagged };
    Ok(match curve.iter().rposition(|&(_, acc)| acc >= floor) {
        Some(i) => pick(i, false),
        None => pick(0, true),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(f: f64) -> PruneLevel {
        PruneLevel::from_fraction(f).unwrap()
    }

    #[test]
    fn default_schedules() {
        let w = PruneSchedule::weight_default();
        let got: Vec<f64> = w.levels.iter().map(|l| l.fraction()).collect();
        assert_eq!(got, vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]);
        let c = PruneSchedule::channel_default();
        assert_eq!(c.levels.len(), 20);
        assert_eq!(c.levels[0].fraction(), 0.05);
        assert_eq!(c.levels[18].fraction(), 0.95);
        assert_eq!(c.levels[19].fraction(), 0.99);
        assert!(PruneSchedule::new(PruneKind::Weight, vec![level(0.5), level(0.5)]).is_err());
    }

    #[test]
    fn level_parsing_and_counts() {
        assert!(PruneLevel::from_fraction(0.0).is_err());
        assert!(PruneLevel::from_fraction(1.0).is_err());
        assert!("1.5".parse::<PruneLevel>().is_err());
        assert_eq!("0.95".parse::<PruneLevel>().unwrap().ppm(), 950_000);
        assert_eq!(level(0.4).count_of(5), 2);
        assert_eq!(level(0.95).count_of(100), 95);
        assert_eq!(level(0.3).count_of(10), 3);
        assert_eq!(level(0.95).to_string(), "0.95");
    }

    #[test]
    fn ideal_speedups() {
        assert_eq!(expected_speedup(Technique::WeightPrune(level(0.95))), 20.0);
        assert_eq!(expected_speedup(Technique::WeightPrune(level(0.5))), 2.0);
        assert_eq!(expected_speedup(Technique::F16), 2.0);
        assert_eq!(expected_speedup(Technique::I8Calibrated), 4.0);
        let t = Technique::WeightPrune(level(0.95));
        assert!((achieved_fraction(2.6, 1.0, t).unwrap() - 0.13).abs() <= 1e-9);
        assert_eq!(achieved_fraction(5.0, 5.0, Technique::F16).unwrap(), 0.5);
        assert_eq!(achieved_fraction(20.0, 1.0, t).unwrap(), 1.0);
        assert!(achieved_fraction(0.0, 1.0, t).is_err());
    }

    #[test]
    fn elbow_rule() {
        let e = select_elbow(&[(0.5, 0.93), (0.8, 0.92), (0.9, 0.80)], 0.93, 0.02).unwrap();
        assert_eq!((e.compression, e.accuracy, e.flagged), (0.8, 0.92, false));
        let e = select_elbow(&[(0.5, 0.93), (0.8, 0.93)], 0.93, 0.02).unwrap();
        assert_eq!(e.index, 1);
        let e = select_elbow(&[(0.5, 0.5), (0.8, 0.4)], 0.93, 0.02).unwrap();
        assert_eq!((e.index, e.flagged), (0, true));
        assert!(select_elbow(&[], 0.9, 0.02).is_err());
        assert!(select_elbow(&[(0.5, 0.9), (0.5, 0.9)], 0.9, 0.02).is_err());
    }

    proptest::proptest! {
        #[test]
        fn prune_speedup_inverts_keep_fraction(ppm in 1u32..PruneLevel::SCALE) {
            let l = PruneLevel::from_ppm(ppm).unwrap();
            let s = expected_speedup(Technique::ChannelPrune(l));
            let keep = (PruneLevel::SCALE - ppm) as f64 / PruneLevel::SCALE as f64;
            let product = s * keep;
            proptest::prop_assert!((product - 1.0).abs() <= 2.0 * f64::EPSILON, "{product}");
        }

        #[test]
        fn elbow_matches_scan(accs in proptest::collection::vec(0.0f64..1.0, 1..12), drop in 0.0f64..0.3) {
            let mut sorted = accs.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let curve: Vec<(f64, f64)> = sorted.iter().enumerate().map(|(i, &a)| ((i + 1) as f64 / 20.0, a)).collect();
            let baseline = 1.0;
            let e = select_elbow(&curve, baseline, drop).unwrap();
            let mut want = None;
            for (i, &(_, a)) in curve.iter().enumerate() {
                if a >= baseline - drop - 1e-12 {
                    want = Some(i);
                }
            }
            proptest::prop_assert_eq!(e.index, want.unwrap_or(0));
            proptest::prop_assert_eq!(e.flagged, want.is_none());
        }
    }
}
