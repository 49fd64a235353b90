use serde::Serialize;

use crate::error::Result;
use crate::graph::{Layer, Model};
use crate::kernels::ConvWeights;
use crate::tensor::DType;

/// Stored parameters: convolution `k*c*r*s` (+`k` bias), dense `in*out`
/// (+`out` bias). Sparse convolution weights count their nonzeros.
pub fn count_params(model: &Model) -> u64 {
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv2d(c) => {
                let g = c.spec.geom;
                let w = match &c.spec.weights {
                    ConvWeights::Sparse(m) => m.nnz(),
                    _ => g.k * g.filter_len(),
                };
                (w + c.spec.bias.as_ref().map_or(0, Vec::len)) as u64
            }
            Layer::Dense(d) => (d.weights.len() + d.bias.as_ref().map_or(0, Vec::len)) as u64,
            _ => 0,
        })
        .sum()
}

/// Multiply-accumulates per sample: convolution `k*c*r*s*h_out*w_out`
/// (nonzero weights only when stored sparse), dense `in*out`.
pub fn count_macs(model: &Model) -> Result<u64> {
    let shapes = model.shapes()?;
    Ok(model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Layer::Conv2d(c) => {
                let g = c.spec.geom;
                let out = shapes[i + 1];
                let weights = match &c.spec.weights {
                    ConvWeights::Sparse(m) => m.nnz(),
                    _ => g.k * g.filter_len(),
                };
                (weights * out.h * out.w) as u64
            }
            Layer::Dense(d) => (d.in_features * d.out_features) as u64,
            _ => 0,
        })
        .sum())
}

/// Bytes of parameter storage at the model's dtype.
pub fn stored_bytes(model: &Model) -> u64 {
    count_params(model) * model.dtype.bytes_per_element() as u64
}

/// Fraction of bytes removed, `1 - after / before`.
pub fn compression_ratio(before: &Model, after: &Model) -> f64 {
    let b = stored_bytes(before);
    if b == 0 {
        return 0.0;
    }
    1.0 - stored_bytes(after) as f64 / b as f64
}

/// Outcome of one compression pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressionResult {
    pub technique: String,
    pub level: Option<f64>,
    pub dtype: DType,
    pub compression_ratio: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub accuracy: Option<f64>,
}

impl CompressionResult {
    pub const CSV_HEADER: &'static str =
        "technique,level,dtype,compression_ratio,params_before,params_after,macs_before,macs_after,top1";

    pub fn new(technique: &str, level: Option<f64>, before: &Model, after: &Model, accuracy: Option<f64>) -> Result<Self> {
        Ok(CompressionResult {
            technique: technique.to_string(),
            level,
            dtype: after.dtype,
            compression_ratio: compression_ratio(before, after),
            params_before: count_params(before),
            params_after: count_params(after),
            macs_before: count_macs(before)?,
            macs_after: count_macs(after)?,
            accuracy,
        })
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{},{},{},{},{}",
            self.technique,
            self.level.map(|l| l.to_string()).unwrap_or_default(),
            self.dtype,
            self.compression_ratio,
            self.params_before,
            self.params_after,
            self.macs_before,
            self.macs_after,
            opt(self.accuracy)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{prune_channels_global_l1, quantize_model_f16, quantize_model_i8, uncalibrated_params, PruneLevel};
    use crate::graph::{generate_toy_workload, WorkloadConfig};
    use crate::kernels::{ConvGeometry, ConvSpec};
    use crate::tensor::Shape4;

    /// Loop-nest MAC counter for one convolution.
    fn brute_force_macs(g: ConvGeometry, h: usize, w: usize) -> u64 {
        let (ho, wo) = g.output_hw(h, w).unwrap();
        let mut n = 0u64;
        for _k in 0..g.k {
            for _y in 0..ho {
                for _x in 0..wo {
                    for _c in 0..g.c {
                        for _i in 0..g.r {
                            for _j in 0..g.s {
                                n += 1;
                            }
                        }
                    }
                }
            }
        }
        n
    }

    fn single_conv(g: ConvGeometry, h: usize, w: usize) -> Model {
        let spec = ConvSpec::dense(g, vec![0.5; g.k * g.filter_len()], Some(vec![0.0; g.k])).unwrap();
        Model::new("c", Shape4::new(1, g.c, h, w).unwrap(), g.k, vec![Layer::conv(spec), Layer::GlobalAvgPool]).unwrap()
    }

    #[test]
    fn mac_counts() {
        let g = ConvGeometry::new(8, 3, 3, 3, 1, 1).unwrap();
        let m = single_conv(g, 16, 16);
        assert_eq!(count_macs(&m).unwrap(), brute_force_macs(g, 16, 16));
        assert_eq!(count_macs(&m).unwrap(), 55_296);
        assert_eq!(count_params(&m), 8 * 27 + 8);
        let one = single_conv(ConvGeometry::new(1, 1, 1, 1, 1, 0).unwrap(), 1, 1);
        assert_eq!(count_macs(&one).unwrap(), 1);
    }

    #[test]
    fn dtype_ratios_are_exact() {
        let (m, _, _) = generate_toy_workload(&WorkloadConfig { train: 1, test: 1, ..WorkloadConfig::default() }).unwrap();
        let h = quantize_model_f16(&m).unwrap();
        assert_eq!(stored_bytes(&h) * 2, stored_bytes(&m));
        assert_eq!(compression_ratio(&m, &h), 0.5);
        let q = quantize_model_i8(&m, &uncalibrated_params(&m)).unwrap();
        assert_eq!(stored_bytes(&q) * 4, stored_bytes(&m));
        assert_eq!(compression_ratio(&m, &q), 0.75);
    }

    #[test]
    fn channel_pruned_params_match_shape_arithmetic() {
        let (m, _, _) = generate_toy_workload(&WorkloadConfig { train: 1, test: 1, ..WorkloadConfig::default() }).unwrap();
        let r = prune_channels_global_l1(&m, PruneLevel::from_fraction(0.5).unwrap()).unwrap();
        // Toy model: 3x3 conv 3 -> 12 channels with bias, then an 8x8 conv
        // 12 -> 10 with bias. Half of the 12 prunable channels go.
        let kept = 12 - 6;
        let expected = (kept * 3 * 9 + kept) + (10 * kept * 64 + 10);
        assert_eq!(count_params(&r.model), expected as u64);
        let result = CompressionResult::new("channel-prune", Some(0.5), &m, &r.model, None).unwrap();
        assert_eq!(result.params_after, expected as u64);
        assert!(result.csv_row().starts_with("channel-prune,0.5,f32,"));
    }
}
