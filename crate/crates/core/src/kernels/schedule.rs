use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolution algorithm family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Direct,
    Gemm,
    SpatialPack,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Direct, Algorithm::Gemm, Algorithm::SpatialPack];

    pub const fn name(self) -> &'static str {
        match self {
            Algorithm::Direct => "direct",
            Algorithm::Gemm => "gemm",
            Algorithm::SpatialPack => "spatial_pack",
        }
    }

    /// Short label used in the summary tables.
    pub const fn label(self) -> &'static str {
        match self {
            Algorithm::Direct => "Direct",
            Algorithm::Gemm => "GEMM",
            Algorithm::SpatialPack => "Spatial",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Algorithm::Direct),
            "gemm" | "im2col" => Ok(Algorithm::Gemm),
            "spatial_pack" | "spatial-pack" | "spatial" => Ok(Algorithm::SpatialPack),
            other => Err(Error::InvalidArgument(format!("unknown algorithm `{other}`"))),
        }
    }
}

pub const UNROLL_FACTORS: [usize; 4] = [1, 2, 4, 8];

/// Algorithm choice plus loop-transformation knobs for one convolution.
///
/// Tile sizes larger than the dimension they tile are clamped by the kernels,
/// so any positive power of two is valid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schedule {
    pub algorithm: Algorithm,
    pub tile_oc: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub unroll: usize,
    pub parallel: bool,
}

impl Schedule {
    /// The untuned schedule: no tiling, no unrolling, single-threaded.
    pub const fn untuned(algorithm: Algorithm) -> Self {
        Schedule { algorithm, tile_oc: 1, tile_h: 1, tile_w: 1, unroll: 1, parallel: false }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tile_oc", self.tile_oc), ("tile_h", self.tile_h), ("tile_w", self.tile_w)] {
            if v == 0 || !v.is_power_of_two() {
                return Err(Error::Schedule(format!("{name} must be a positive power of two, got {v}")));
            }
        }
        if !UNROLL_FACTORS.contains(&self.unroll) {
            return Err(Error::Schedule(format!("unroll must be one of 1, 2, 4, 8, got {}", self.unroll)));
        }
        Ok(())
    }

    pub(crate) fn expect(&self, algorithm: Algorithm) -> Result<()> {
        self.validate()?;
        if self.algorithm != algorithm {
            return Err(Error::Schedule(format!(
                "schedule selects {} but the {} kernel was invoked",
                self.algorithm, algorithm
            )));
        }
        Ok(())
    }

    pub fn with_algorithm(mut self, algorithm: Algorithm) -> Self {
        self.algorithm = algorithm;
        self
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::untuned(Algorithm::Direct)
    }
}
