//! Sequential CNN models: layer graph, shape checking, execution,
//! serialization, and the synthetic workload they are evaluated on.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{pool_output_hw, ConvSpec, ConvWeights, Schedule};
use crate::tensor::{dequantize_i8, DType, QuantParams, Shape4};

mod dataset;
mod forward;
mod io;
mod workload;

pub use dataset::LabeledDataset;
pub use forward::{evaluate_top1, forward, forward_activations, run_conv_layer};
pub use io::{load_dataset, load_model, save_dataset, save_model};
pub use workload::{generate_toy_workload, WorkloadConfig};

/// Convolution layer with optional int8 bias parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    /// Set on int8 models: the stored bias is `quantize(bias, bias_quant)`,
    /// and `spec.bias` holds its dequantized values.
    pub bias_quant: Option<QuantParams>,
}

/// Dense weight storage, row-major `out_features x in_features`.
#[derive(Clone, Debug, PartialEq)]
pub enum DenseWeights {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>, QuantParams),
}

impl DenseWeights {
    pub fn len(&self) -> usize {
        match self {
            DenseWeights::F32(w) => w.len(),
            DenseWeights::F16(w) => w.len(),
            DenseWeights::I8(w, _) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            DenseWeights::F32(_) => DType::F32,
            DenseWeights::F16(_) => DType::F16,
            DenseWeights::I8(..) => DType::I8,
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            DenseWeights::F32(w) => w.clone(),
            DenseWeights::F16(w) => w.iter().map(|v| v.to_f32()).collect(),
            DenseWeights::I8(w, q) => w.iter().map(|&v| dequantize_i8(v, *q)).collect(),
        }
    }
}

/// Fully-connected layer over the flattened `(c, h, w)` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: DenseWeights,
    pub bias: Option<Vec<f32>>,
    pub bias_quant: Option<QuantParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(ConvLayer),
    Relu,
    MaxPool2d { window: usize, stride: usize },
    GlobalAvgPool,
    Dense(DenseLayer),
    Softmax,
}

impl Layer {
    pub fn conv(spec: ConvSpec) -> Layer {
        Layer::Conv2d(ConvLayer { spec, bias_quant: None })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Dense(_) => "dense",
            Layer::Softmax => "softmax",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match self {
            Layer::Conv2d(c) => Some(c),
            _ => None,
        }
    }
}

/// A sequential model. Layer `i` consumes activation `i` and produces
/// activation `i + 1`; activation 0 is the model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub name: String,
    pub input: Shape4,
    pub classes: usize,
    pub dtype: DType,
    pub layers: Vec<Layer>,
    /// int8 models only: quantization parameters of every activation,
    /// `layers.len() + 1` entries.
    pub activation_quant: Option<Vec<QuantParams>>,
}

/// Per-convolution schedules for one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMap {
    /// One schedule for every convolution layer.
    Shared(Schedule),
    /// One schedule per convolution layer, in layer order.
    PerLayer(Vec<Schedule>),
}

impl ScheduleMap {
    pub fn for_conv(&self, ordinal: usize) -> Result<&Schedule> {
        match self {
            ScheduleMap::Shared(s) => Ok(s),
            ScheduleMap::PerLayer(v) => v
                .get(ordinal)
                .ok_or_else(|| Error::Schedule(format!("no schedule for convolution #{ordinal}"))),
        }
    }

    /// The schedules of the first `convs` convolution layers.
    pub fn expand(&self, convs: usize) -> Result<Vec<Schedule>> {
        (0..convs).map(|i| self.for_conv(i).copied()).collect()
    }
}

impl Model {
    /// Builds a model and checks that it is executable.
    pub fn new(name: impl Into<String>, input: Shape4, classes: usize, layers: Vec<Layer>) -> Result<Model> {
        let m = Model { name: name.into(), input, classes, dtype: DType::F32, layers, activation_quant: None };
        m.validate()?;
        Ok(m)
    }

    /// Activation shapes, `layers.len() + 1` entries starting with the input.
    pub fn shapes(&self) -> Result<Vec<Shape4>> {
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv2d(c) => c.spec.geom.output_shape(cur).map_err(|e| Error::layer(i, e.to_string()))?,
                Layer::Relu | Layer::Softmax => cur,
                Layer::MaxPool2d { window, stride } => {
                    let (h, w) = pool_output_hw(cur.h, cur.w, *window, *stride).map_err(|e| Error::layer(i, e.to_string()))?;
                    Shape4 { h, w, ..cur }
                }
                Layer::GlobalAvgPool => Shape4 { h: 1, w: 1, ..cur },
                Layer::Dense(d) => {
                    if d.in_features != cur.sample_len() {
                        return Err(Error::layer(
                            i,
                            format!("dense expects {} inputs but receives {cur}", d.in_features),
                        ));
                    }
                    Shape4 { n: cur.n, c: d.out_features, h: 1, w: 1 }
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Checks shape composition, the classifier head, and that every layer
    /// can execute at the model's dtype.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let out = *shapes.last().expect("at least the input shape");
        if out.c != self.classes || out.h != 1 || out.w != 1 {
            return Err(Error::Shape(format!("model produces {out}, expected {} class scores", self.classes)));
        }
        if !self.layers.iter().any(|l| matches!(l, Layer::Conv2d(_) | Layer::Dense(_))) {
            return Err(Error::Shape("model has no classifier layer".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(c) => {
                    let dt = c.spec.weights.dtype();
                    if dt != self.dtype {
                        return Err(Error::layer(i, format!("{dt} weights in a {} model", self.dtype)));
                    }
                    if self.dtype == DType::I8 && c.spec.bias.is_some() && c.bias_quant.is_none() {
                        return Err(Error::layer(i, "int8 bias without quantization parameters"));
                    }
                    if let ConvWeights::I8(q) = &c.spec.weights {
                        if q.quant.zero_point != 0 {
                            return Err(Error::layer(i, "int8 weights must be symmetric"));
                        }
                    }
                }
                Layer::Dense(d) => {
                    if d.weights.dtype() != self.dtype {
                        return Err(Error::layer(i, format!("{} weights in a {} model", d.weights.dtype(), self.dtype)));
                    }
                    if d.weights.len() != d.in_features * d.out_features {
                        return Err(Error::layer(i, "dense weight count does not match its shape"));
                    }
                    if d.bias.as_ref().is_some_and(|b| b.len() != d.out_features) {
                        return Err(Error::layer(i, "dense bias length does not match out_features"));
                    }
                }
                _ => {}
            }
        }
        if self.dtype == DType::I8 {
            match &self.activation_quant {
                Some(q) if q.len() == self.layers.len() + 1 => {
                    for p in q {
                        p.validate()?;
                    }
                }
                Some(q) => {
                    return Err(Error::MissingQuant(format!(
                        "{} activation parameters for {} layers",
                        q.len(),
                        self.layers.len()
                    )))
                }
                None => return Err(Error::MissingQuant("int8 model without activation parameters".into())),
            }
        }
        Ok(())
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| l.as_conv().map(|c| (i, c)))
    }

    pub fn conv_count(&self) -> usize {
        self.conv_layers().count()
    }

    /// Replaces every dense f32 convolution with its CSR form.
    pub fn to_sparse(&self) -> Model {
        let mut m = self.clone();
        for layer in &mut m.layers {
            if let Layer::Conv2d(c) = layer {
                c.spec = c.spec.to_sparse();
            }
        }
        m
    }

    pub fn to_dense(&self) -> Model {
        let mut m = self.clone();
        for layer in &mut m.layers {
            if let Layer::Conv2d(c) = layer {
                c.spec = c.spec.to_dense();
            }
        }
        m
    }

    pub fn is_sparse(&self) -> bool {
        self.conv_layers().any(|(_, c)| c.spec.weights.is_sparse())
    }
}
