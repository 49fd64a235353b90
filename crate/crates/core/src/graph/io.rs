//! Manifest + blob serialization. The manifest is JSON; the blob next to it
//! holds every tensor little-endian in its stored dtype. Offsets are in
//! bytes, lengths in elements.

use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{ConvLayer, DenseLayer, DenseWeights, LabeledDataset, Layer, Model};
use crate::kernels::{ConvGeometry, ConvSpec, ConvWeights};
use crate::tensor::{dequantize_i8, quantize_i8, DType, QTensor4, QuantParams, Shape4, Tensor4};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    name: String,
    input: [usize; 4],
    dtype: DType,
    classes: usize,
    layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation_quant: Option<Vec<QuantParams>>,
    blob: String,
    blob_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type")]
enum LayerEntry {
    #[serde(rename = "conv2d")]
    Conv2d {
        k: usize,
        c: usize,
        r: usize,
        s: usize,
        stride: usize,
        pad: usize,
        #[serde(flatten)]
        params: ParamRefs,
        #[serde(default)]
        sparse: bool,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { window: usize, stride: usize },
    #[serde(rename = "global_avg_pool")]
    GlobalAvgPool,
    #[serde(rename = "dense")]
    Dense {
        in_features: usize,
        out_features: usize,
        #[serde(flatten)]
        params: ParamRefs,
    },
    #[serde(rename = "softmax")]
    Softmax,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRefs {
    weight_offset: usize,
    weight_len: usize,
    bias_offset: usize,
    /// 0 when the layer has no bias.
    bias_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_quant: Option<QuantParams>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_path(manifest: &Path) -> (PathBuf, String) {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let name = format!("{stem}.bin");
    (manifest.with_file_name(&name), name)
}

fn write_files(path: &Path, manifest: &impl Serialize, blob: &[u8], blob_file: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(blob_file, blob).map_err(|e| Error::io(blob_file, e))?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn f32s(&mut self, v: &[f32]) -> usize {
        let off = self.bytes.len();
        v.iter().for_each(|x| self.bytes.extend_from_slice(&x.to_le_bytes()));
        off
    }

    fn f16s(&mut self, v: impl IntoIterator<Item = f16>) -> usize {
        let off = self.bytes.len();
        v.into_iter().for_each(|x| self.bytes.extend_from_slice(&x.to_le_bytes()));
        off
    }

    fn i8s(&mut self, v: &[i8]) -> usize {
        let off = self.bytes.len();
        self.bytes.extend(v.iter().map(|x| *x as u8));
        off
    }

    /// Writes a bias in the model dtype; int8 biases use `bias_quant`.
    fn bias(&mut self, dtype: DType, bias: &Option<Vec<f32>>, bias_quant: Option<QuantParams>) -> Result<(usize, usize)> {
        let Some(b) = bias else { return Ok((0, 0)) };
        let off = match dtype {
            DType::F32 => self.f32s(b),
            DType::F16 => self.f16s(b.iter().map(|&v| f16::from_f32(v))),
            DType::I8 => {
                let q = bias_quant.ok_or_else(|| Error::MissingQuant("int8 bias without parameters".into()))?;
                self.i8s(&b.iter().map(|&v| quantize_i8(v, q)).collect::<Vec<_>>())
            }
        };
        Ok((off, b.len()))
    }
}

/// Writes `model` to the JSON manifest at `path` and its weights to a
/// `.bin` blob with the same stem.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    model.validate()?;
    let (blob_file, blob_name) = blob_path(path);
    let mut w = BlobWriter { bytes: Vec::new() };
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        layers.push(match layer {
            Layer::Conv2d(conv) => {
                let g = conv.spec.geom;
                let (weight_offset, quant) = match &conv.spec.weights {
                    ConvWeights::Dense(t) => (w.f32s(t.data()), None),
                    ConvWeights::Sparse(_) => (w.f32s(&conv.spec.weights.to_dense_f32()), None),
                    ConvWeights::F16(t) => (w.f16s(t.data().iter().copied()), None),
                    ConvWeights::I8(q) => (w.i8s(q.tensor.data()), Some(q.quant)),
                };
                let (bias_offset, bias_len) = w.bias(model.dtype, &conv.spec.bias, conv.bias_quant)?;
                LayerEntry::Conv2d {
                    k: g.k,
                    c: g.c,
                    r: g.r,
                    s: g.s,
                    stride: g.stride,
                    pad: g.pad,
                    params: ParamRefs {
                        weight_offset,
                        weight_len: g.k * g.filter_len(),
                        bias_offset,
                        bias_len,
                        quant,
                        bias_quant: conv.bias_quant,
                    },
                    sparse: conv.spec.weights.is_sparse(),
                }
            }
            Layer::Dense(d) => {
                let (weight_offset, quant) = match &d.weights {
                    DenseWeights::F32(v) => (w.f32s(v), None),
                    DenseWeights::F16(v) => (w.f16s(v.iter().copied()), None),
                    DenseWeights::I8(v, q) => (w.i8s(v), Some(*q)),
                };
                let (bias_offset, bias_len) = w.bias(model.dtype, &d.bias, d.bias_quant)?;
                LayerEntry::Dense {
                    in_features: d.in_features,
                    out_features: d.out_features,
                    params: ParamRefs {
                        weight_offset,
                        weight_len: d.weights.len(),
                        bias_offset,
                        bias_len,
                        quant,
                        bias_quant: d.bias_quant,
                    },
                }
            }
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool2d { window, stride } => LayerEntry::MaxPool2d { window: *window, stride: *stride },
            Layer::GlobalAvgPool => LayerEntry::GlobalAvgPool,
            Layer::Softmax => LayerEntry::Softmax,
        });
    }
    let manifest = ModelManifest {
        name: model.name.clone(),
        input: model.input.to_array(),
        dtype: model.dtype,
        classes: model.classes,
        layers,
        activation_quant: model.activation_quant.clone(),
        blob: blob_name,
        blob_sha256: sha256_hex(&w.bytes),
    };
    write_files(path, &manifest, &w.bytes, &blob_file)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

fn read_blob(path: &Path, name: &str, sha: &str) -> Result<Vec<u8>> {
    if name.contains(['/', '\\']) || name == ".." {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("blob name {name:?} must be a bare file name") });
    }
    let file = path.with_file_name(name);
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(sha) {
        return Err(Error::Format {
            path: file,
            reason: format!("sha256 {actual} does not match manifest {sha} ({} bytes)", bytes.len()),
        });
    }
    Ok(bytes)
}

struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl BlobReader<'_> {
    fn slice(&self, offset: usize, len: usize, width: usize) -> std::result::Result<&[u8], String> {
        let end = len.checked_mul(width).and_then(|n| n.checked_add(offset));
        match end {
            Some(end) if end <= self.bytes.len() => Ok(&self.bytes[offset..end]),
            _ => Err(format!(
                "{len} elements of {width} bytes at offset {offset} exceed the {}-byte blob",
                self.bytes.len()
            )),
        }
    }

    fn f32s(&self, offset: usize, len: usize) -> std::result::Result<Vec<f32>, String> {
        Ok(self.slice(offset, len, 4)?.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }

    fn f16s(&self, offset: usize, len: usize) -> std::result::Result<Vec<f16>, String> {
        Ok(self.slice(offset, len, 2)?.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]])).collect())
    }

    fn i8s(&self, offset: usize, len: usize) -> std::result::Result<Vec<i8>, String> {
        Ok(self.slice(offset, len, 1)?.iter().map(|&b| b as i8).collect())
    }

    fn bias(&self, dtype: DType, p: &ParamRefs, expected: usize) -> std::result::Result<Option<Vec<f32>>, String> {
        if p.bias_len == 0 {
            return Ok(None);
        }
        if p.bias_len != expected {
            return Err(format!("bias_len {} but the layer has {expected} outputs", p.bias_len));
        }
        Ok(Some(match dtype {
            DType::F32 => self.f32s(p.bias_offset, p.bias_len)?,
            DType::F16 => self.f16s(p.bias_offset, p.bias_len)?.into_iter().map(f16::to_f32).collect(),
            DType::I8 => {
                let q = p.bias_quant.ok_or("int8 bias without bias_quant")?;
                self.i8s(p.bias_offset, p.bias_len)?.into_iter().map(|v| dequantize_i8(v, q)).collect()
            }
        }))
    }

    fn conv(&self, dtype: DType, g: ConvGeometry, p: &ParamRefs, sparse: bool) -> std::result::Result<ConvLayer, String> {
        let n = g.k * g.filter_len();
        if p.weight_len != n {
            return Err(format!("weight_len {} but k*c*r*s = {n}", p.weight_len));
        }
        let shape = g.weight_shape();
        let weights = match dtype {
            DType::F32 => ConvWeights::Dense(Tensor4::new(shape, self.f32s(p.weight_offset, n)?).map_err(|e| e.to_string())?),
            DType::F16 => ConvWeights::F16(Tensor4::new(shape, self.f16s(p.weight_offset, n)?).map_err(|e| e.to_string())?),
            DType::I8 => {
                let quant = p.quant.ok_or("int8 weights without quant")?;
                let tensor = Tensor4::new(shape, self.i8s(p.weight_offset, n)?).map_err(|e| e.to_string())?;
                ConvWeights::I8(QTensor4 { tensor, quant })
            }
        };
        if sparse && dtype != DType::F32 {
            return Err(format!("sparse storage is only available for f32, not {dtype}"));
        }
        let bias = self.bias(dtype, p, g.k)?;
        let spec = ConvSpec::new(g, weights, bias).map_err(|e| e.to_string())?;
        Ok(ConvLayer { spec: if sparse { spec.to_sparse() } else { spec }, bias_quant: p.bias_quant })
    }

    fn dense(&self, dtype: DType, inputs: usize, outputs: usize, p: &ParamRefs) -> std::result::Result<DenseLayer, String> {
        let n = inputs * outputs;
        if p.weight_len != n {
            return Err(format!("weight_len {} but in*out = {n}", p.weight_len));
        }
        let weights = match dtype {
            DType::F32 => DenseWeights::F32(self.f32s(p.weight_offset, n)?),
            DType::F16 => DenseWeights::F16(self.f16s(p.weight_offset, n)?),
            DType::I8 => DenseWeights::I8(self.i8s(p.weight_offset, n)?, p.quant.ok_or("int8 weights without quant")?),
        };
        Ok(DenseLayer {
            in_features: inputs,
            out_features: outputs,
            weights,
            bias: self.bias(dtype, p, outputs)?,
            bias_quant: p.bias_quant,
        })
    }
}

/// Loads a model written by [`save_model`], checking the blob digest, every
/// tensor extent and the layer shape composition.
pub fn load_model(path: &Path) -> Result<Model> {
    let m: ModelManifest = read_json(path)?;
    let bytes = read_blob(path, &m.blob, &m.blob_sha256)?;
    let blob = BlobReader { bytes: &bytes };
    let format = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let [n, c, h, w] = m.input;
    let input = Shape4::new(n, c, h, w).map_err(|e| format(e.to_string()))?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for (i, entry) in m.layers.iter().enumerate() {
        let at = |reason: String| format(format!("layer {i}: {reason}"));
        layers.push(match entry {
            LayerEntry::Conv2d { k, c, r, s, stride, pad, params, sparse } => {
                let g = ConvGeometry::new(*k, *c, *r, *s, *stride, *pad).map_err(|e| at(e.to_string()))?;
                Layer::Conv2d(blob.conv(m.dtype, g, params, *sparse).map_err(at)?)
            }
            LayerEntry::Dense { in_features, out_features, params } => {
                Layer::Dense(blob.dense(m.dtype, *in_features, *out_features, params).map_err(at)?)
            }
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::MaxPool2d { window, stride } => Layer::MaxPool2d { window: *window, stride: *stride },
            LayerEntry::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerEntry::Softmax => Layer::Softmax,
        });
    }
    let model = Model {
        name: m.name,
        input,
        classes: m.classes,
        dtype: m.dtype,
        layers,
        activation_quant: m.activation_quant,
    };
    model.validate().map_err(|e| format(e.to_string()))?;
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    count: usize,
    shape: [usize; 4],
    classes: usize,
    seed: u64,
    labels: Vec<usize>,
    blob: String,
    blob_sha256: String,
}

/// Writes a dataset manifest at `path` and its f32 images to a `.bin` blob.
pub fn save_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    data.validate()?;
    let shape = data.sample_shape().ok_or_else(|| Error::InvalidArgument("cannot save an empty dataset".into()))?;
    let (blob_file, blob_name) = blob_path(path);
    let mut w = BlobWriter { bytes: Vec::with_capacity(data.len() * shape.len() * 4) };
    for x in &data.inputs {
        w.f32s(x.data());
    }
    let manifest = DatasetManifest {
        count: data.len(),
        shape: shape.to_array(),
        classes: data.classes,
        seed: data.seed,
        labels: data.labels.clone(),
        blob: blob_name,
        blob_sha256: sha256_hex(&w.bytes),
    };
    write_files(path, &manifest, &w.bytes, &blob_file)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let m: DatasetManifest = read_json(path)?;
    let bytes = read_blob(path, &m.blob, &m.blob_sha256)?;
    let format = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let [n, c, h, w] = m.shape;
    let shape = Shape4::new(n, c, h, w).map_err(|e| format(e.to_string()))?;
    if m.labels.len() != m.count {
        return Err(format(format!("{} labels for {} samples", m.labels.len(), m.count)));
    }
    let values = BlobReader { bytes: &bytes }.f32s(0, m.count * shape.len()).map_err(format)?;
    if values.len() * 4 != bytes.len() {
        return Err(format(format!("blob holds {} bytes, expected {}", bytes.len(), values.len() * 4)));
    }
    let inputs = values
        .chunks_exact(shape.len().max(1))
        .map(|chunk| Tensor4::new(shape, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(inputs, m.labels, m.classes, m.seed).map_err(|e| format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{forward, ScheduleMap};
    use crate::kernels::{Algorithm, Schedule};

    fn small_model() -> Model {
        let g = ConvGeometry::new(2, 1, 2, 2, 1, 0).unwrap();
        let w: Vec<f32> = (0..8).map(|i| i as f32 * 0.37 - 1.1).collect();
        Model::new(
            "small",
            Shape4::new(1, 1, 3, 3).unwrap(),
            2,
            vec![Layer::conv(ConvSpec::dense(g, w, Some(vec![0.25, -0.5])).unwrap()), Layer::Relu, Layer::GlobalAvgPool, Layer::Softmax],
        )
        .unwrap()
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = small_model();
        save_model(&m, &path).unwrap();
        assert!(dir.path().join("m.bin").exists());
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let x = Tensor4::from_fn(m.input, |_, _, y, x| (y * 3 + x) as f32 * 0.1);
        let s = ScheduleMap::Shared(Schedule::untuned(Algorithm::Direct));
        assert_eq!(forward(&m, &x, &s).unwrap(), forward(&back, &x, &s).unwrap());

        let sparse = m.to_sparse();
        save_model(&sparse, &path).unwrap();
        assert!(load_model(&path).unwrap().is_sparse());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&small_model(), &path).unwrap();
        let blob = dir.path().join("m.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn bad_extent_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&small_model(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"weight_len\": 8", "\"weight_len\": 9");
        fs::write(&path, text).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn hand_written_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let weights: Vec<u8> = [2.0f32, 1.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("tiny.bin"), &weights).unwrap();
        let manifest = format!(
            r#"{{"name": "tiny", "input": [1, 1, 1, 1], "dtype": "f32", "classes": 2,
               "layers": [{{"type": "conv2d", "k": 2, "c": 1, "r": 1, "s": 1, "stride": 1, "pad": 0,
                            "weight_offset": 0, "weight_len": 2, "bias_offset": 0, "bias_len": 0}}],
               "blob": "tiny.bin", "blob_sha256": "{}"}}"#,
            sha256_hex(&weights)
        );
        let path = dir.path().join("tiny.json");
        fs::write(&path, manifest).unwrap();
        let m = load_model(&path).unwrap();
        let x = Tensor4::new(m.input, vec![3.0]).unwrap();
        let s = ScheduleMap::Shared(Schedule::untuned(Algorithm::Gemm));
        assert_eq!(forward(&m, &x, &s).unwrap(), vec![6.0, 3.0]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let shape = Shape4::new(1, 2, 2, 2).unwrap();
        let inputs = (0..3).map(|k| Tensor4::from_fn(shape, |_, c, y, x| (k * 8 + c * 4 + y * 2 + x) as f32 / 7.0)).collect();
        let d = LabeledDataset::new(inputs, vec![0, 2, 1], 3, 11).unwrap();
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }
}
