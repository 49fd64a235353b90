//! Latency sources. Production code uses [`MonotonicTimer`]; the fake timers
//! make every timing-dependent path deterministic.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compress::Technique;
use crate::error::{Error, Result};
use crate::kernels::{Algorithm, Schedule};
use crate::tensor::DType;

/// One convolution layer taking part in a timed execution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeLayer {
    pub layer: usize,
    pub schedule: Schedule,
    /// Multiply-accumulates the layer performs (nonzero weights only when
    /// sparse).
    pub macs: u64,
}

/// Describes what is being timed, so fake timers can answer per
/// configuration.
#[derive(Clone, Copy, Debug)]
pub struct Probe<'a> {
    pub label: &'a str,
    pub technique: Option<Technique>,
    pub dtype: DType,
    pub sparse: bool,
    pub layers: &'a [ProbeLayer],
    /// 0 for the warm-up run.
    pub run: usize,
}

impl Probe<'_> {
    /// The algorithm shared by all layers, if they agree.
    pub fn algorithm(&self) -> Option<Algorithm> {
        let first = self.layers.first()?.schedule.algorithm;
        self.layers.iter().all(|l| l.schedule.algorithm == first).then_some(first)
    }
}

/// Times one execution of `work`, returning nanoseconds. Implementations
/// must run `work` exactly once and propagate its error.
pub trait Timer {
    fn time(&mut self, probe: &Probe<'_>, work: &mut dyn FnMut() -> Result<()>) -> Result<u64>;
}

/// Wall-clock timing with [`Instant`].
#[derive(Clone, Copy, Debug, Default)]
pub struct MonotonicTimer;

impl Timer for MonotonicTimer {
    fn time(&mut self, _probe: &Probe<'_>, work: &mut dyn FnMut() -> Result<()>) -> Result<u64> {
        let start = Instant::now();
        work()?;
        Ok((start.elapsed().as_nanos() as u64).max(1))
    }
}

/// Replays a fixed list of samples, cycling when exhausted.
#[derive(Clone, Debug)]
pub struct SequenceTimer {
    samples: Vec<u64>,
    next: usize,
}

impl SequenceTimer {
    pub fn new(samples: Vec<u64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Timer("sample list is empty".into()));
        }
        if samples.contains(&0) {
            return Err(Error::Timer("samples must be positive".into()));
        }
        Ok(SequenceTimer { samples, next: 0 })
    }
}

impl Timer for SequenceTimer {
    fn time(&mut self, _probe: &Probe<'_>, work: &mut dyn FnMut() -> Result<()>) -> Result<u64> {
        work()?;
        let v = self.samples[self.next % self.samples.len()];
        self.next += 1;
        Ok(v)
    }
}

/// Answers with a caller-supplied function of the probe.
pub struct FnTimer<F>(pub F);

impl<F: FnMut(&Probe<'_>) -> u64> Timer for FnTimer<F> {
    fn time(&mut self, probe: &Probe<'_>, work: &mut dyn FnMut() -> Result<()>) -> Result<u64> {
        work()?;
        match (self.0)(probe) {
            0 => Err(Error::Timer("fake timer returned 0 ns".into())),
            v => Ok(v),
        }
    }
}

/// Deterministic latency model: the sum over convolution layers of
/// `macs * per-MAC cost`, scaled by algorithm, dtype, sparsity and how far
/// the schedule is from a fixed sweet spot, plus a constant overhead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModelTimer {
    #[serde(default = "CostModelTimer::default_overhead")]
    pub overhead_ns: u64,
}

impl Default for CostModelTimer {
    fn default() -> Self {
        CostModelTimer { overhead_ns: Self::default_overhead() }
    }
}

impl CostModelTimer {
    fn default_overhead() -> u64 {
        1_000
    }

    pub fn layer_cost(layer: &ProbeLayer, dtype: DType, sparse: bool) -> f64 {
        let s = layer.schedule;
        let per_mac = match s.algorithm {
            Algorithm::Direct => 1.0,
            Algorithm::Gemm => 0.8,
            Algorithm::SpatialPack => 0.9,
        };
        let tile = |t: usize| 1.0 + 0.15 * ((t.max(1) as f64).log2() - 2.0).abs();
        let unroll = match s.unroll {
            1 => 1.0,
            2 => 0.9,
            4 => 0.8,
            _ => 0.85,
        };
        let parallel = if s.parallel { 0.6 } else { 1.0 };
        let dtype = match dtype {
            DType::F32 => 1.0,
            DType::F16 => 0.7,
            DType::I8 => 0.5,
        };
        let sparse = if sparse { 1.3 } else { 1.0 };
        layer.macs as f64 * per_mac * tile(s.tile_oc) * tile(s.tile_h) * tile(s.tile_w) * unroll * parallel * dtype * sparse
    }
}

impl Timer for CostModelTimer {
    fn time(&mut self, probe: &Probe<'_>, work: &mut dyn FnMut() -> Result<()>) -> Result<u64> {
        work()?;
        let conv: f64 = probe.layers.iter().map(|l| Self::layer_cost(l, probe.dtype, probe.sparse)).sum();
        Ok(self.overhead_ns + conv.ceil() as u64)
    }
}

/// Timing fixture as stored in JSON, e.g. `{"kind": "samples", "samples":
/// [9, 3, 5, 4]}` or `{"kind": "cost_model"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimerFixture {
    Samples { samples: Vec<u64> },
    CostModel {
        #[serde(default = "CostModelTimer::default_overhead")]
        overhead_ns: u64,
    },
}

impl TimerFixture {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn into_timer(self) -> Result<Box<dyn Timer + Send>> {
        Ok(match self {
            TimerFixture::Samples { samples } => Box::new(SequenceTimer::new(samples)?),
            TimerFixture::CostModel { overhead_ns } => Box::new(CostModelTimer { overhead_ns }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(layers: &[ProbeLayer]) -> Probe<'_> {
        Probe { label: "t", technique: None, dtype: DType::F32, sparse: false, layers, run: 0 }
    }

    #[test]
    fn sequence_cycles_and_runs_work() {
        let mut t = SequenceTimer::new(vec![9, 3]).unwrap();
        let mut calls = 0;
        let got: Vec<u64> = (0..3).map(|_| t.time(&probe(&[]), &mut || { calls += 1; Ok(()) }).unwrap()).collect();
        assert_eq!(got, vec![9, 3, 9]);
        assert_eq!(calls, 3);
        assert!(SequenceTimer::new(vec![]).is_err());
        assert!(SequenceTimer::new(vec![1, 0]).is_err());
    }

    #[test]
    fn work_errors_propagate() {
        let mut t = CostModelTimer::default();
        let r = t.time(&probe(&[]), &mut || Err(Error::Unsupported("x".into())));
        assert!(r.is_err());
    }

    #[test]
    fn cost_model_prefers_its_sweet_spot() {
        let base = ProbeLayer { layer: 0, schedule: Schedule::untuned(Algorithm::Gemm), macs: 10_000 };
        let tuned = ProbeLayer {
            schedule: Schedule { tile_oc: 4, tile_h: 4, tile_w: 4, unroll: 4, parallel: true, ..base.schedule },
            ..base
        };
        assert!(CostModelTimer::layer_cost(&tuned, DType::F32, false) < CostModelTimer::layer_cost(&base, DType::F32, false));
    }

    #[test]
    fn fixtures_parse() {
        let f: TimerFixture = serde_json::from_str(r#"{"kind": "samples", "samples": [9, 3, 5, 4]}"#).unwrap();
        assert_eq!(f, TimerFixture::Samples { samples: vec![9, 3, 5, 4] });
        let f: TimerFixture = serde_json::from_str(r#"{"kind": "cost_model"}"#).unwrap();
        assert_eq!(f, TimerFixture::CostModel { overhead_ns: 1_000 });
        assert!(serde_json::from_str::<TimerFixture>(r#"{"kind": "samples", "values": []}"#).is_err());
    }
}
