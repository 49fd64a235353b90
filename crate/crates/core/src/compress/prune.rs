use std::collections::BTreeMap;

use crate::compress::PruneLevel;
use crate::error::{Error, Result};
use crate::graph::{ConvLayer, DenseWeights, Layer, Model};
use crate::kernels::{ConvGeometry, ConvSpec};
use crate::tensor::DType;

fn require_f32(model: &Model, pass: &str) -> Result<()> {
    if model.dtype != DType::F32 {
        return Err(Error::Unsupported(format!("{pass} needs an f32 model, got {}", model.dtype)));
    }
    if model.conv_count() == 0 {
        return Err(Error::InvalidArgument(format!("{pass} needs at least one convolution layer")));
    }
    Ok(())
}

fn rebuild_conv(conv: &ConvLayer, weights: Vec<f32>, bias: Option<Vec<f32>>, sparse: bool) -> Result<ConvLayer> {
    let spec = ConvSpec::dense(conv.spec.geom, weights, bias)?;
    Ok(ConvLayer { spec: if sparse { spec.to_sparse() } else { spec }, bias_quant: conv.bias_quant })
}

#[derive(Clone, Debug)]
pub struct WeightPruneResult {
    pub model: Model,
    /// Per convolution layer in model order, `true` where the weight survives.
    pub mask: Vec<Vec<bool>>,
    pub zeroed: usize,
    /// Convolution weights considered, `P`.
    pub total: usize,
    /// Layers left without any nonzero weight. Still executable.
    pub empty_layers: Vec<usize>,
}

/// Zeroes the `floor(fraction * P)` convolution weights of smallest magnitude
/// over the whole model, `P` being the total number of convolution weights.
/// Ties are broken by layer, then flat index. Biases and dense layers are
/// left alone; the output keeps each layer's storage format.
pub fn prune_weights_global_l1(model: &Model, level: PruneLevel) -> Result<WeightPruneResult> {
    require_f32(model, "weight pruning")?;
    let layers: Vec<(usize, &ConvLayer)> = model.conv_layers().collect();
    let mut weights: Vec<Vec<f32>> = layers.iter().map(|(_, c)| c.spec.weights.to_dense_f32()).collect();
    let total: usize = weights.iter().map(Vec::len).sum();
    let count = level.count_of(total);

    let mut order: Vec<(f32, usize, usize)> = weights
        .iter()
        .enumerate()
        .flat_map(|(l, w)| w.iter().enumerate().map(move |(i, v)| (v.abs(), l, i)))
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut mask: Vec<Vec<bool>> = weights.iter().map(|w| vec![true; w.len()]).collect();
    for &(_, l, i) in &order[..count] {
        weights[l][i] = 0.0;
        mask[l][i] = false;
    }

    let mut out = model.clone();
    let mut empty_layers = Vec::new();
    for ((idx, conv), w) in layers.iter().zip(weights) {
        if w.iter().all(|v| *v == 0.0) {
            empty_layers.push(*idx);
        }
        out.layers[*idx] = Layer::Conv2d(rebuild_conv(conv, w, conv.spec.bias.clone(), conv.spec.weights.is_sparse())?);
    }
    Ok(WeightPruneResult { model: out, mask, zeroed: count, total, empty_layers })
}

/// Output channels taken out of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemovedChannels {
    pub layer: usize,
    /// Ascending channel indices of the original layer.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ChannelPruneResult {
    /// The compacted model.
    pub model: Model,
    pub removed: Vec<RemovedChannels>,
    /// `floor(fraction * K_total)`.
    pub requested: usize,
    /// Output channels over all prunable layers, `K_total`.
    pub prunable_total: usize,
}

impl ChannelPruneResult {
    pub fn removed_count(&self) -> usize {
        self.removed.iter().map(|r| r.channels.len()).sum()
    }

    /// Fewer channels were removed than requested because every prunable
    /// layer keeps at least one.
    pub fn shortfall(&self) -> usize {
        self.requested - self.removed_count()
    }
}

/// The layer consuming a convolution's output channels.
#[derive(Clone, Copy, Debug)]
enum Consumer {
    Conv(usize),
    Dense(usize),
}

/// Next convolution or dense layer reached through channel-wise layers only.
/// `None` for the convolution producing the class scores, or when a
/// channel-mixing layer (softmax) intervenes.
fn consumer(model: &Model, layer: usize) -> Option<Consumer> {
    for (j, l) in model.layers.iter().enumerate().skip(layer + 1) {
        match l {
            Layer::Relu | Layer::MaxPool2d { .. } | Layer::GlobalAvgPool => continue,
            Layer::Conv2d(_) => return Some(Consumer::Conv(j)),
            Layer::Dense(_) => return Some(Consumer::Dense(j)),
            Layer::Softmax => return None,
        }
    }
    None
}

/// L1 norm of one output channel: its filter plus its bias.
fn channel_scores(conv: &ConvLayer) -> Vec<f32> {
    let g = conv.spec.geom;
    let w = conv.spec.weights.to_dense_f32();
    let bias = conv.spec.bias.clone().unwrap_or_else(|| vec![0.0; g.k]);
    w.chunks_exact(g.filter_len()).zip(bias).map(|(f, b)| f.iter().map(|v| v.abs()).sum::<f32>() + b.abs()).collect()
}

/// Removes the `floor(fraction * K_total)` lowest-scoring output channels
/// over all prunable convolution layers and compacts the model. A channel is
/// scored by the L1 norm of its filter and bias. The convolution producing
/// the class scores is exempt and every layer keeps at least one channel;
/// if that makes the target unreachable, as many as possible are removed.
pub fn prune_channels_global_l1(model: &Model, level: PruneLevel) -> Result<ChannelPruneResult> {
    require_f32(model, "channel pruning")?;
    let dense = model.to_dense();
    let prunable: Vec<(usize, &ConvLayer)> =
        dense.conv_layers().filter(|(i, _)| consumer(&dense, *i).is_some()).collect();
    let prunable_total: usize = prunable.iter().map(|(_, c)| c.spec.geom.k).sum();
    let requested = level.count_of(prunable_total);

    let mut candidates: Vec<(f32, usize, usize)> = prunable
        .iter()
        .flat_map(|(i, c)| channel_scores(c).into_iter().enumerate().map(move |(ch, s)| (s, *i, ch)))
        .collect();
    candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut remaining: BTreeMap<usize, usize> = prunable.iter().map(|(i, c)| (*i, c.spec.geom.k)).collect();
    let mut chosen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut taken = 0;
    for (_, layer, ch) in candidates {
        if taken == requested {
            break;
        }
        let left = remaining.get_mut(&layer).expect("candidate from a prunable layer");
        if *left > 1 {
            *left -= 1;
            chosen.entry(layer).or_default().push(ch);
            taken += 1;
        }
    }
    let removed: Vec<RemovedChannels> = chosen
        .into_iter()
        .map(|(layer, mut channels)| {
            channels.sort_unstable();
            RemovedChannels { layer, channels }
        })
        .collect();
    let compacted = compact_channels(&dense, &removed)?;
    Ok(ChannelPruneResult { model: compacted, removed, requested, prunable_total })
}

fn check_removal(model: &Model, removed: &[RemovedChannels]) -> Result<()> {
    for r in removed {
        let conv = model.layers.get(r.layer).and_then(Layer::as_conv).ok_or_else(|| Error::layer(r.layer, "not a convolution"))?;
        if consumer(model, r.layer).is_none() {
            return Err(Error::layer(r.layer, "output channels of this layer cannot be removed"));
        }
        if r.channels.windows(2).any(|w| w[0] >= w[1]) || r.channels.iter().any(|&c| c >= conv.spec.geom.k) {
            return Err(Error::layer(r.layer, format!("invalid channel list {:?}", r.channels)));
        }
        if r.channels.len() >= conv.spec.geom.k {
            return Err(Error::layer(r.layer, "cannot remove every channel"));
        }
    }
    Ok(())
}

/// Zeroes the filters and biases of the given channels, keeping all shapes.
pub fn mask_channels(model: &Model, removed: &[RemovedChannels]) -> Result<Model> {
    require_f32(model, "channel masking")?;
    check_removal(model, removed)?;
    let mut out = model.to_dense();
    for r in removed {
        let Layer::Conv2d(conv) = &out.layers[r.layer] else { unreachable!("checked above") };
        let flen = conv.spec.geom.filter_len();
        let mut w = conv.spec.weights.to_dense_f32();
        let mut bias = conv.spec.bias.clone();
        for &ch in &r.channels {
            w[ch * flen..(ch + 1) * flen].fill(0.0);
            if let Some(b) = bias.as_mut() {
                b[ch] = 0.0;
            }
        }
        out.layers[r.layer] = Layer::Conv2d(rebuild_conv(conv, w, bias, false)?);
    }
    Ok(out)
}

fn keep_list(k: usize, removed: &[usize]) -> Vec<usize> {
    (0..k).filter(|c| removed.binary_search(c).is_err()).collect()
}

/// Physically removes the given output channels and the matching input
/// slices of each consuming convolution or dense layer.
pub fn compact_channels(model: &Model, removed: &[RemovedChannels]) -> Result<Model> {
    require_f32(model, "channel compaction")?;
    check_removal(model, removed)?;
    let shapes = model.shapes()?;
    let mut out = model.to_dense();
    for r in removed {
        let Some(Layer::Conv2d(conv)) = out.layers.get(r.layer).cloned() else { unreachable!("checked above") };
        let g = conv.spec.geom;
        let keep = keep_list(g.k, &r.channels);
        let w = conv.spec.weights.to_dense_f32();
        let flen = g.filter_len();
        let new_w: Vec<f32> = keep.iter().flat_map(|&ch| w[ch * flen..(ch + 1) * flen].iter().copied()).collect();
        let new_b = conv.spec.bias.as_ref().map(|b| keep.iter().map(|&ch| b[ch]).collect());
        let new_g = ConvGeometry { k: keep.len(), ..g };
        out.layers[r.layer] = Layer::Conv2d(ConvLayer {
            spec: ConvSpec::dense(new_g, new_w, new_b)?,
            bias_quant: conv.bias_quant,
        });

        match consumer(model, r.layer).expect("checked above") {
            Consumer::Conv(j) => {
                let Layer::Conv2d(next) = &out.layers[j] else { unreachable!("consumer is a convolution") };
                let ng = next.spec.geom;
                let plane = ng.r * ng.s;
                let w = next.spec.weights.to_dense_f32();
                let new_w: Vec<f32> = (0..ng.k)
                    .flat_map(|k| {
                        let filter = &w[k * ng.filter_len()..(k + 1) * ng.filter_len()];
                        keep.iter().flat_map(move |&c| filter[c * plane..(c + 1) * plane].iter().copied())
                    })
                    .collect();
                let next_g = ConvGeometry { c: keep.len(), ..ng };
                out.layers[j] = Layer::Conv2d(ConvLayer {
                    spec: ConvSpec::dense(next_g, new_w, next.spec.bias.clone())?,
                    bias_quant: next.bias_quant,
                });
            }
            Consumer::Dense(j) => {
                let Layer::Dense(d) = &mut out.layers[j] else { unreachable!("consumer is dense") };
                let plane = shapes[j].h * shapes[j].w;
                let DenseWeights::F32(w) = &d.weights else { unreachable!("f32 model") };
                let new_w: Vec<f32> = (0..d.out_features)
                    .flat_map(|o| {
                        let row = &w[o * d.in_features..(o + 1) * d.in_features];
                        keep.iter().flat_map(move |&c| row[c * plane..(c + 1) * plane].iter().copied())
                    })
                    .collect();
                d.in_features = keep.len() * plane;
                d.weights = DenseWeights::F32(new_w);
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{forward, DenseLayer, ScheduleMap};
    use crate::kernels::{Algorithm, Schedule};
    use crate::tensor::{Shape4, Tensor4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn level(f: f64) -> PruneLevel {
        PruneLevel::from_fraction(f).unwrap()
    }

    fn conv_layer(k: usize, c: usize, r: usize, w: Vec<f32>, bias: Option<Vec<f32>>) -> Layer {
        Layer::conv(ConvSpec::dense(ConvGeometry::new(k, c, r, r, 1, 0).unwrap(), w, bias).unwrap())
    }

    fn weights_of(m: &Model) -> Vec<Vec<f32>> {
        m.conv_layers().map(|(_, c)| c.spec.weights.to_dense_f32()).collect()
    }

    #[test]
    fn single_layer_magnitude_order() {
        let m = Model::new(
            "m",
            Shape4::new(1, 1, 1, 1).unwrap(),
            4,
            vec![conv_layer(4, 1, 1, vec![0.1, -0.5, 0.3, -0.2], None)],
        )
        .unwrap();
        let r = prune_weights_global_l1(&m, level(0.5)).unwrap();
        assert_eq!(weights_of(&r.model)[0], vec![0.0, -0.5, 0.3, 0.0]);
        assert_eq!(r.zeroed, 2);
        let r = prune_weights_global_l1(&m, level(0.2)).unwrap();
        assert_eq!(r.model, m);
        assert!(r.mask[0].iter().all(|&k| k));
    }

    #[test]
    fn global_not_per_layer() {
        // A 1x3 filter [1, 2, 3] feeding two 1x1 filters [0.5, 4]: P = 5 and
        // floor(0.4 * 5) = 2 zeroes, taken globally as 0.5 and 1.
        let g0 = ConvGeometry::new(1, 1, 1, 3, 1, 0).unwrap();
        let m = Model::new(
            "m",
            Shape4::new(1, 1, 1, 3).unwrap(),
            2,
            vec![Layer::conv(ConvSpec::dense(g0, vec![1.0, 2.0, 3.0], None).unwrap()), conv_layer(2, 1, 1, vec![0.5, 4.0], None)],
        )
        .unwrap();
        let r = prune_weights_global_l1(&m, level(0.4)).unwrap();
        assert_eq!(weights_of(&r.model), vec![vec![0.0, 2.0, 3.0], vec![0.0, 4.0]]);
        assert_eq!(r.mask, vec![vec![false, true, true], vec![false, true]]);
    }

    #[test]
    fn empty_layers_are_flagged() {
        let m = Model::new(
            "m",
            Shape4::new(1, 1, 1, 1).unwrap(),
            1,
            vec![conv_layer(2, 1, 1, vec![0.01, 0.02], None), conv_layer(1, 2, 1, vec![5.0, 6.0], None)],
        )
        .unwrap();
        let r = prune_weights_global_l1(&m.to_sparse(), level(0.5)).unwrap();
        assert_eq!(r.empty_layers, vec![0]);
        assert!(r.model.is_sparse());
        let x = Tensor4::new(m.input, vec![1.0]).unwrap();
        let s = ScheduleMap::Shared(Schedule::untuned(Algorithm::SpatialPack));
        assert_eq!(forward(&r.model, &x, &s).unwrap(), vec![0.0]);
    }

    #[test]
    fn channel_example() {
        // Filter norms 0.1 and 9.0: channel 0 goes, and with it input slice 0
        // of the next layer.
        let m = Model::new(
            "m",
            Shape4::new(1, 1, 1, 1).unwrap(),
            1,
            vec![conv_layer(2, 1, 1, vec![0.1, 9.0], None), conv_layer(1, 2, 1, vec![7.0, 8.0], None)],
        )
        .unwrap();
        let r = prune_channels_global_l1(&m, level(0.5)).unwrap();
        assert_eq!(r.removed, vec![RemovedChannels { layer: 0, channels: vec![0] }]);
        assert_eq!(weights_of(&r.model), vec![vec![9.0], vec![8.0]]);
        let r = prune_channels_global_l1(&m, level(0.4)).unwrap();
        assert_eq!(r.model, m);
    }

    #[test]
    fn last_conv_exempt_and_one_channel_survives() {
        let m = Model::new(
            "m",
            Shape4::new(1, 1, 1, 1).unwrap(),
            2,
            vec![conv_layer(3, 1, 1, vec![1.0, 2.0, 3.0], None), conv_layer(2, 3, 1, vec![0.0; 6], None)],
        )
        .unwrap();
        let r = prune_channels_global_l1(&m, level(0.99)).unwrap();
        assert_eq!(r.prunable_total, 3);
        assert_eq!(r.requested, 2);
        assert_eq!(r.removed_count(), 2);
        let r = prune_channels_global_l1(&m, level(0.999)).unwrap();
        assert_eq!(r.requested, 2);
        assert_eq!(r.shortfall(), 0);
        assert_eq!(r.model.conv_layers().nth(1).unwrap().1.spec.geom.k, 2);
    }

    #[test]
    fn dense_columns_are_compacted() {
        // conv(2 channels, 2x2 map) -> dense over 8 features.
        let m = Model::new(
            "m",
            Shape4::new(1, 1, 2, 2).unwrap(),
            1,
            vec![
                conv_layer(2, 1, 1, vec![5.0, 0.5], None),
                Layer::Dense(DenseLayer {
                    in_features: 8,
                    out_features: 1,
                    weights: DenseWeights::F32((0..8).map(|v| v as f32).collect()),
                    bias: None,
                    bias_quant: None,
                }),
            ],
        )
        .unwrap();
        let r = prune_channels_global_l1(&m, level(0.5)).unwrap();
        let Layer::Dense(d) = &r.model.layers[1] else { panic!() };
        assert_eq!(d.in_features, 4);
        assert_eq!(d.weights, DenseWeights::F32(vec![0.0, 1.0, 2.0, 3.0]));
    }

    fn random_model(rng: &mut ChaCha8Rng) -> Model {
        let mut w = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let g0 = ConvGeometry::new(6, 2, 3, 3, 1, 1).unwrap();
        let g1 = ConvGeometry::new(5, 6, 3, 3, 1, 0).unwrap();
        let g2 = ConvGeometry::new(3, 5, 2, 2, 1, 0).unwrap();
        let (w0, b0, w1, b1, w2) = (w(g0.filter_len() * 6), w(6), w(g1.filter_len() * 5), w(5), w(g2.filter_len() * 3));
        Model::new(
            "three",
            Shape4::new(1, 2, 8, 8).unwrap(),
            3,
            vec![
                Layer::conv(ConvSpec::dense(g0, w0, Some(b0)).unwrap()),
                Layer::Relu,
                Layer::MaxPool2d { window: 2, stride: 2 },
                Layer::conv(ConvSpec::dense(g1, w1, Some(b1)).unwrap()),
                Layer::Relu,
                Layer::conv(ConvSpec::dense(g2, w2, None).unwrap()),
                Layer::GlobalAvgPool,
            ],
        )
        .unwrap()
    }

    #[test]
    fn masked_equals_compacted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng);
        let r = prune_channels_global_l1(&m, level(0.5)).unwrap();
        assert_eq!(r.removed_count(), 5);
        let masked = mask_channels(&m, &r.removed).unwrap();
        let s = ScheduleMap::Shared(Schedule::untuned(Algorithm::Direct));
        for _ in 0..20 {
            let x = Tensor4::from_fn(m.input, |_, _, _, _| rng.random_range(-1.0..1.0));
            let a = forward(&masked, &x, &s).unwrap();
            let b = forward(&r.model, &x, &s).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-5, "{a:?} vs {b:?}");
            }
        }
    }
}
