//! Layer-indexed networks.
//!
//! Layers are stored front-to-back, but parameterized layers are addressed by a
//! back-end-first index: `l = 1` is the classifier, `l = L` is nearest the
//! input. Activation layers (relu, pooling, flatten, the softmax head) carry no
//! index.

mod backward;
mod checkpoint;
mod infer;
mod kernels;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use backward::{backward_loglik, BackwardStream, Gradients};
pub use checkpoint::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use infer::{
    argmax, evaluate_accuracy, forward, forward_batch, partial_inference, ActivationCache,
    Precision,
};
pub(crate) use infer::partial_accuracy;
pub use kernels::log_likelihood;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_height: usize,
        in_width: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    SoftmaxHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { kind }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// Shapes of the parameter tensors (weight, bias). Dense weights are
    /// `[in, out]`; convolution weights are `[out_c, in_c, k, k]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self.kind {
            LayerKind::Dense { in_features, out_features } => {
                vec![vec![in_features, out_features], vec![out_features]]
            }
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: String| {
            Err(Error::Dimension(format!(
                "{:?} expects input {want}, got {input:?}",
                self.kind
            )))
        };
        match self.kind {
            LayerKind::Dense { in_features, out_features } => {
                if input != [in_features] {
                    return mismatch(format!("[{in_features}]"));
                }
                Ok(vec![out_features])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                in_height,
                in_width,
            } => {
                if input != [in_channels, in_height, in_width] {
                    return mismatch(format!("[{in_channels}, {in_height}, {in_width}]"));
                }
                match (
                    conv_out(in_height, kernel, stride, padding),
                    conv_out(in_width, kernel, stride, padding),
                ) {
                    (Some(h), Some(w)) => Ok(vec![out_channels, h, w]),
                    _ => mismatch("large enough for the kernel".into()),
                }
            }
            LayerKind::MaxPool2d { kernel, stride } => match input {
                [c, h, w] => match (conv_out(*h, kernel, stride, 0), conv_out(*w, kernel, stride, 0))
                {
                    (Some(oh), Some(ow)) => Ok(vec![*c, oh, ow]),
                    _ => mismatch("large enough for the pooling window".into()),
                },
                _ => mismatch("[c, h, w]".into()),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::SoftmaxHead => {
                if input.len() != 1 {
                    return mismatch("a logit vector".into());
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Forward multiply-accumulates for one sample. Zero for activation layers.
    pub fn forward_macs(&self) -> u64 {
        match self.kind {
            LayerKind::Dense { in_features, out_features } => (in_features * out_features) as u64,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                in_height,
                in_width,
            } => {
                let oh = conv_out(in_height, kernel, stride, padding).unwrap_or(0);
                let ow = conv_out(in_width, kernel, stride, padding).unwrap_or(0);
                (oh * ow * out_channels * in_channels * kernel * kernel) as u64
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `[weight, bias]` for parameterized layers, empty otherwise.
    pub params: Vec<Tensor>,
    /// Whether each parameter tensor may be dampened.
    pub eligible: Vec<bool>,
}

impl Layer {
    pub fn activation(kind: LayerKind) -> Self {
        Layer { spec: LayerSpec::new(kind), params: Vec::new(), eligible: Vec::new() }
    }

    pub fn with_params(kind: LayerKind, params: Vec<Tensor>) -> Result<Self> {
        let spec = LayerSpec::new(kind);
        let shapes = spec.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::ShapeMismatch(format!(
                "{kind:?} expects parameter shapes {shapes:?}, got {:?}",
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        let eligible = vec![true; params.len()];
        Ok(Layer { spec, params, eligible })
    }

    pub fn weight(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn bias(&self) -> &Tensor {
        &self.params[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-sample input shape of every layer position, plus the final output.
    shapes: Vec<Vec<usize>>,
    /// Positions of the parameterized layers, front to back.
    param_positions: Vec<usize>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut param_positions = Vec::new();
        for (pos, layer) in layers.iter().enumerate() {
            let next = layer.spec.output_shape(&shapes[pos])?;
            if layer.spec.has_params() {
                param_positions.push(pos);
                let expected = layer.spec.param_shapes();
                if expected.len() != layer.params.len()
                    || expected.iter().zip(&layer.params).any(|(s, p)| s.as_slice() != p.shape())
                {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {pos} parameters do not match {:?}",
                        layer.spec.kind
                    )));
                }
                if layer.eligible.len() != layer.params.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {pos} eligibility flags do not match its parameters"
                    )));
                }
            } else if !layer.params.is_empty() {
                return Err(Error::ShapeMismatch(format!(
                    "activation layer {pos} carries parameters"
                )));
            }
            shapes.push(next);
        }
        if param_positions.is_empty() {
            return Err(Error::Config("model has no parameterized layer".into()));
        }
        if layers.last().map(|l| l.spec.kind) != Some(LayerKind::SoftmaxHead) {
            return Err(Error::Config("the last layer must be a softmax head".into()));
        }
        if layers[..layers.len() - 1].iter().any(|l| l.spec.kind == LayerKind::SoftmaxHead) {
            return Err(Error::Config("softmax head must be the last layer only".into()));
        }
        Ok(Model { input_shape, layers, shapes, param_positions })
    }

    /// Multi-layer perceptron `sizes[0] -> ... -> sizes[last]` with ReLU between
    /// dense layers and He-normal initialization.
    pub fn mlp<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid MLP sizes {sizes:?}")));
        }
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let kind = LayerKind::Dense { in_features: w[0], out_features: w[1] };
            layers.push(init_layer(kind, w[0], rng)?);
            if i + 2 < sizes.len() {
                layers.push(Layer::activation(LayerKind::Relu));
            }
        }
        layers.push(Layer::activation(LayerKind::SoftmaxHead));
        Model::new(vec![sizes[0]], layers)
    }

    /// Two 3x3 convolutions (each followed by ReLU and 2x2 max pooling) and two
    /// dense layers. Height and width must be divisible by 4.
    pub fn tiny_cnn<R: Rng>(
        channels: usize,
        height: usize,
        width: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "TinyCNN input {height}x{width} must be a positive multiple of 4"
            )));
        }
        let (c1, c2) = (4, 8);
        let conv1 = LayerKind::Conv2d {
            in_channels: channels,
            out_channels: c1,
            kernel: 3,
            stride: 1,
            padding: 1,
            in_height: height,
            in_width: width,
        };
        let conv2 = LayerKind::Conv2d {
            in_channels: c1,
            out_channels: c2,
            kernel: 3,
            stride: 1,
            padding: 1,
            in_height: height / 2,
            in_width: width / 2,
        };
        let pool = LayerKind::MaxPool2d { kernel: 2, stride: 2 };
        let flat = c2 * (height / 4) * (width / 4);
        let layers = vec![
            init_layer(conv1, channels * 9, rng)?,
            Layer::activation(LayerKind::Relu),
            Layer::activation(pool),
            init_layer(conv2, c1 * 9, rng)?,
            Layer::activation(LayerKind::Relu),
            Layer::activation(pool),
            Layer::activation(LayerKind::Flatten),
            init_layer(LayerKind::Dense { in_features: flat, out_features: hidden }, flat, rng)?,
            Layer::activation(LayerKind::Relu),
            init_layer(LayerKind::Dense { in_features: hidden, out_features: classes }, hidden, rng)?,
            Layer::activation(LayerKind::SoftmaxHead),
        ];
        Model::new(vec![channels, height, width], layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of parameterized layers `L`.
    pub fn depth(&self) -> usize {
        self.param_positions.len()
    }

    pub(crate) fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn check_index(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.depth() {
            return Err(Error::LayerOutOfRange { index: l, depth: self.depth() });
        }
        Ok(())
    }

    /// Front-to-back position of parameterized layer `l`.
    pub fn position_of(&self, l: usize) -> Result<usize> {
        self.check_index(l)?;
        Ok(self.param_positions[self.depth() - l])
    }

    /// Back-end-first index of the parameterized layer at `position`, if any.
    pub fn index_at(&self, position: usize) -> Option<usize> {
        self.param_positions
            .iter()
            .position(|&p| p == position)
            .map(|i| self.depth() - i)
    }

    pub fn param_layer(&self, l: usize) -> Result<&Layer> {
        let pos = self.position_of(l)?;
        Ok(&self.layers[pos])
    }

    pub fn param_layer_mut(&mut self, l: usize) -> Result<&mut Layer> {
        let pos = self.position_of(l)?;
        Ok(&mut self.layers[pos])
    }

    /// Parameter tensor shapes of layer `l`.
    pub fn param_shapes(&self, l: usize) -> Result<Vec<Vec<usize>>> {
        Ok(self.param_layer(l)?.spec.param_shapes())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Marks parameter tensor `tensor` (0 = weight, 1 = bias) of layer `l` as
    /// eligible or not for dampening.
    pub fn set_eligible(&mut self, l: usize, tensor: usize, eligible: bool) -> Result<()> {
        let layer = self.param_layer_mut(l)?;
        let slot = layer.eligible.get_mut(tensor).ok_or_else(|| {
            Error::Config(format!("layer {l} has no parameter tensor {tensor}"))
        })?;
        *slot = eligible;
        Ok(())
    }

    /// True when every parameter of layers `from..=L` is bit-identical to `other`.
    pub fn suffix_bit_eq(&self, other: &Model, from: usize) -> bool {
        if self.depth() != other.depth() {
            return false;
        }
        (from.max(1)..=self.depth()).all(|l| {
            let (a, b) = match (self.param_layer(l), other.param_layer(l)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => return false,
            };
            a.params.iter().zip(&b.params).all(|(x, y)| x.bit_eq(y))
        })
    }

    pub fn params_bit_eq(&self, other: &Model) -> bool {
        self.suffix_bit_eq(other, 1)
    }
}

fn init_layer<R: Rng>(kind: LayerKind, fan_in: usize, rng: &mut R) -> Result<Layer> {
    let spec = LayerSpec::new(kind);
    let shapes = spec.param_shapes();
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let weight_len: usize = shapes[0].iter().product();
    let weight = Tensor::new(shapes[0].clone(), (0..weight_len).map(|_| normal.sample(rng)).collect())?;
    let bias = Tensor::zeros(shapes[1].clone());
    Layer::with_params(kind, vec![weight, bias])
}

/// Inputs with their class labels, processed in stored order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: Tensor, label: usize) {
        self.inputs.push(input);
        self.labels.push(label);
    }

    /// Samples whose label satisfies `keep`, in order.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> LabeledBatch {
        let mut out = LabeledBatch::default();
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            if keep(y) {
                out.push(x.clone(), y);
            }
        }
        out
    }

    pub fn take(&self, n: usize) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.iter().take(n).cloned().collect(),
            labels: self.labels.iter().take(n).copied().collect(),
        }
    }

    pub(crate) fn check_against(&self, model: &Model) -> Result<()> {
        let classes = model.num_classes();
        for (n, (x, &y)) in self.inputs.iter().zip(&self.labels).enumerate() {
            if x.shape() != model.input_shape() {
                return Err(Error::Dimension(format!(
                    "sample {n} has shape {:?}, model expects {:?}",
                    x.shape(),
                    model.input_shape()
                )));
            }
            if y >= classes {
                return Err(Error::Config(format!(
                    "sample {n} label {y} out of range for {classes} classes"
                )));
            }
        }
        Ok(())
    }
}
