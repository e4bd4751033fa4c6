//! Sequential network specs, parameter accounting, and the batched
//! forward/backward runtime.
//!
//! A [`ModelSpec`] is a declarative layer list. [`count_params`] works on the
//! spec alone (no allocation), while [`init_weights`] instantiates a [`Model`]
//! whose tensors must agree with that count.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{
    conv_backward_batch, conv_forward_batch, global_max_pool_image, maxpool_image, relu,
    ConvDims, ConvGeometry, PoolGeometry, Tensor,
};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2`; only valid with stride 1.
    Same,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
        repeat: usize,
    },
    MaxPool(PoolGeometry),
    BatchNorm {
        activation: Activation,
    },
    GlobalMaxPool,
    Flatten,
    Dense {
        nodes: usize,
        activation: Activation,
    },
    /// 1x1 reduce, 3x3, 1x1 expand, each followed by batch norm, with a
    /// projection shortcut whenever the channel count or stride changes.
    ResidualBottleneck {
        mid: usize,
        out: usize,
        stride: usize,
    },
}

impl LayerKind {
    fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::GlobalMaxPool => "globalmaxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ResidualBottleneck { .. } => "residual_bottleneck",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            trainable: true,
        }
    }

    /// `repeat` stacked SAME 3x3 ReLU convolutions with `filters` outputs.
    pub fn conv(filters: usize, repeat: usize) -> Self {
        Self::new(LayerKind::Conv {
            filters,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
            activation: Activation::Relu,
            repeat,
        })
    }

    pub fn maxpool2() -> Self {
        Self::new(LayerKind::MaxPool(PoolGeometry::TWO_BY_TWO))
    }

    pub fn batchnorm(activation: Activation) -> Self {
        Self::new(LayerKind::BatchNorm { activation })
    }

    pub fn global_max_pool() -> Self {
        Self::new(LayerKind::GlobalMaxPool)
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn dense(nodes: usize, activation: Activation) -> Self {
        Self::new(LayerKind::Dense { nodes, activation })
    }

    pub fn bottleneck(mid: usize, out: usize, stride: usize) -> Self {
        Self::new(LayerKind::ResidualBottleneck { mid, out, stride })
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

/// Penalty attached to the output layer's weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    None,
    L2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub head_activation: Activation,
    /// Number of leading layers forming the transferable feature extractor.
    pub backbone_len: Option<usize>,
    pub output_regularizer: Regularizer,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Self {
        ModelSpec {
            name: name.into(),
            input_shape,
            layers,
            head_activation: Activation::Linear,
            backbone_len: None,
            output_regularizer: Regularizer::None,
        }
    }

    /// Width of the final layer.
    pub fn output_dim(&self) -> Result<usize> {
        match propagate_shapes(self)?.last() {
            Some(FeatureShape::Flat(n)) => Ok(*n),
            other => Err(Error::Config(format!(
                "model {} does not end in a flat output (ends in {other:?})",
                self.name
            ))),
        }
    }

    /// Checks the binary-task contract: shapes propagate and the model ends
    /// in exactly one single-node linear output layer.
    pub fn validate_binary(&self) -> Result<()> {
        propagate_shapes(self)?;
        match self.layers.last().map(|l| l.kind) {
            Some(LayerKind::Dense {
                nodes: 1,
                activation: Activation::Linear,
            }) => Ok(()),
            other => Err(Error::Config(format!(
                "model {} must end in dense(1, linear), ends in {other:?}",
                self.name
            ))),
        }
    }

    pub fn backbone(&self) -> Option<&[LayerSpec]> {
        self.backbone_len.map(|b| &self.layers[..b])
    }

    fn prefix(&self, layer: usize) -> String {
        match self.backbone_len {
            Some(b) if layer < b => format!("backbone.{layer}"),
            Some(b) => format!("head.{}", layer - b),
            None => format!("layer.{layer}"),
        }
    }
}

/// Activation shape for one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat(usize),
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            FeatureShape::Flat(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            FeatureShape::Flat(n) => vec![n],
        }
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
            FeatureShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

fn conv_geometry(kernel: usize, stride: usize, padding: Padding) -> ConvGeometry {
    ConvGeometry {
        kernel,
        stride,
        pad: match padding {
            Padding::Same => kernel / 2,
            Padding::Explicit(p) => p,
        },
    }
}

fn layer_output(index: usize, layer: &LayerSpec, input: FeatureShape) -> Result<FeatureShape> {
    let fail = |reason: String| Error::Shape {
        layer: format!("{index} ({})", layer.kind.label()),
        reason,
    };
    let spatial = |s: FeatureShape| match s {
        FeatureShape::Spatial {
            channels,
            height,
            width,
        } => Ok((channels, height, width)),
        FeatureShape::Flat(n) => Err(fail(format!(
            "expects a spatial input, got flat vector of {n}"
        ))),
    };
    match layer.kind {
        LayerKind::Conv {
            filters,
            kernel,
            stride,
            padding,
            repeat,
            ..
        } => {
            if repeat == 0 || filters == 0 {
                return Err(fail("filters and repeat must be >= 1".into()));
            }
            if kernel % 2 == 0 {
                return Err(fail(format!("kernel {kernel} must be odd")));
            }
            if padding == Padding::Same && stride != 1 {
                return Err(fail("SAME padding requires stride 1".into()));
            }
            let (_, mut h, mut w) = spatial(input)?;
            let geom = conv_geometry(kernel, stride, padding);
            for _ in 0..repeat {
                let (oh, ow) = geom
                    .output_dims(h, w)
                    .ok_or_else(|| fail(format!("window does not fit {h}x{w}")))?;
                h = oh;
                w = ow;
            }
            Ok(FeatureShape::Spatial {
                channels: filters,
                height: h,
                width: w,
            })
        }
        LayerKind::MaxPool(geom) => {
            let (c, h, w) = spatial(input)?;
            let (oh, ow) = geom.output_dims(h, w).ok_or_else(|| {
                fail(format!(
                    "{}x{} pooling needs at least {}x{} input, got {h}x{w}",
                    geom.window, geom.window, geom.window, geom.window
                ))
            })?;
            Ok(FeatureShape::Spatial {
                channels: c,
                height: oh,
                width: ow,
            })
        }
        LayerKind::BatchNorm { .. } => {
            spatial(input)?;
            Ok(input)
        }
        LayerKind::GlobalMaxPool => Ok(FeatureShape::Flat(spatial(input)?.0)),
        LayerKind::Flatten => Ok(FeatureShape::Flat(input.numel())),
        LayerKind::Dense { nodes, .. } => {
            if nodes == 0 {
                return Err(fail("dense layer needs >= 1 node".into()));
            }
            match input {
                FeatureShape::Flat(_) => Ok(FeatureShape::Flat(nodes)),
                s => Err(fail(format!("expects a flat input, got {s}; add a flatten"))),
            }
        }
        LayerKind::ResidualBottleneck { mid, out, stride } => {
            if mid == 0 || out == 0 || stride == 0 {
                return Err(fail("bottleneck widths and stride must be >= 1".into()));
            }
            let (_, h, w) = spatial(input)?;
            Ok(FeatureShape::Spatial {
                channels: out,
                height: (h - 1) / stride + 1,
                width: (w - 1) / stride + 1,
            })
        }
    }
}

/// Output shape after every layer, in order.
pub fn propagate_shapes(spec: &ModelSpec) -> Result<Vec<FeatureShape>> {
    let [c, h, w] = spec.input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape {
            layer: "input".into(),
            reason: format!("input shape {c}x{h}x{w} has a zero extent"),
        });
    }
    let mut shape = FeatureShape::Spatial {
        channels: c,
        height: h,
        width: w,
    };
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        shape = layer_output(i, layer, shape)?;
        out.push(shape);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    pub trainable: u64,
    pub frozen: u64,
}

impl ParamCount {
    fn add(&mut self, learned: u64, statistics: u64, trainable: bool) {
        self.total += learned + statistics;
        self.frozen += statistics;
        if trainable {
            self.trainable += learned;
        } else {
            self.frozen += learned;
        }
    }
}

fn conv_count(c_in: usize, c_out: usize, k: usize) -> u64 {
    (c_in * k * k * c_out + c_out) as u64
}

/// `(learned, running statistics)` for one layer.
fn layer_param_split(kind: &LayerKind, input: FeatureShape) -> (u64, u64) {
    let in_channels = match input {
        FeatureShape::Spatial { channels, .. } => channels,
        FeatureShape::Flat(n) => n,
    };
    match *kind {
        LayerKind::Conv {
            filters,
            kernel,
            repeat,
            ..
        } => {
            let first = conv_count(in_channels, filters, kernel);
            let rest = (repeat as u64 - 1) * conv_count(filters, filters, kernel);
            (first + rest, 0)
        }
        LayerKind::BatchNorm { .. } => (2 * in_channels as u64, 2 * in_channels as u64),
        LayerKind::Dense { nodes, .. } => ((input.numel() * nodes + nodes) as u64, 0),
        LayerKind::ResidualBottleneck { mid, out, .. } => {
            let mut learned = conv_count(in_channels, mid, 1)
                + conv_count(mid, mid, 3)
                + conv_count(mid, out, 1)
                + 2 * (mid + mid + out) as u64;
            let mut stats = 2 * (mid + mid + out) as u64;
            if needs_projection(in_channels, out, kind) {
                learned += conv_count(in_channels, out, 1) + 2 * out as u64;
                stats += 2 * out as u64;
            }
            (learned, stats)
        }
        LayerKind::MaxPool(_) | LayerKind::GlobalMaxPool | LayerKind::Flatten => (0, 0),
    }
}

fn needs_projection(c_in: usize, c_out: usize, kind: &LayerKind) -> bool {
    matches!(*kind, LayerKind::ResidualBottleneck { stride, .. } if stride != 1 || c_in != c_out)
}

/// Parameter totals from the layer formulas; batch-norm running statistics
/// always count as frozen.
pub fn count_params(spec: &ModelSpec) -> Result<ParamCount> {
    let shapes = propagate_shapes(spec)?;
    let [c, h, w] = spec.input_shape;
    let mut input = FeatureShape::Spatial {
        channels: c,
        height: h,
        width: w,
    };
    let mut count = ParamCount::default();
    for (layer, out) in spec.layers.iter().zip(shapes) {
        let (learned, stats) = layer_param_split(&layer.kind, input);
        count.add(learned, stats, layer.trainable);
        input = out;
    }
    Ok(count)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_statistic(&self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Description of a parameter slot handed to an initializer.
#[derive(Clone, Debug)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub fan_in: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
enum Unit {
    Conv {
        weight: usize,
        bias: usize,
        geom: ConvGeometry,
        activation: Activation,
        c_in: usize,
        c_out: usize,
    },
    Pool(PoolGeometry),
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
        activation: Activation,
    },
    GlobalMaxPool,
    Flatten,
    Dense {
        weight: usize,
        bias: usize,
        activation: Activation,
    },
    Residual {
        main: Vec<Unit>,
        shortcut: Vec<Unit>,
    },
}

impl Unit {
    fn param_indices(&self, out: &mut Vec<usize>) {
        match self {
            Unit::Conv { weight, bias, .. } | Unit::Dense { weight, bias, .. } => {
                out.extend([*weight, *bias])
            }
            Unit::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => out.extend([*gamma, *beta, *mean, *var]),
            Unit::Residual { main, shortcut } => {
                main.iter()
                    .chain(shortcut)
                    .for_each(|u| u.param_indices(out));
            }
            Unit::Pool(_) | Unit::GlobalMaxPool | Unit::Flatten => {}
        }
    }
}

struct Builder<'a, T, F> {
    params: Vec<Param<T>>,
    source: &'a mut F,
}

impl<T: Scalar, F: FnMut(&ParamSlot) -> Result<Tensor<T>>> Builder<'_, T, F> {
    fn push(
        &mut self,
        name: String,
        shape: Vec<usize>,
        kind: ParamKind,
        fan_in: usize,
        activation: Activation,
        trainable: bool,
    ) -> Result<usize> {
        let slot = ParamSlot {
            name,
            shape,
            kind,
            fan_in,
            activation,
        };
        let value = (self.source)(&slot)?;
        if value.shape() != slot.shape.as_slice() {
            return Err(Error::dim(format!(
                "parameter {} needs shape {:?}, initializer gave {:?}",
                slot.name,
                slot.shape,
                value.shape()
            )));
        }
        self.params.push(Param {
            name: slot.name,
            value,
            trainable: trainable && !kind.is_statistic(),
            kind,
        });
        Ok(self.params.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        activation: Activation,
        trainable: bool,
    ) -> Result<Unit> {
        let k = geom.kernel;
        let fan_in = c_in * k * k;
        let weight = self.push(
            format!("{name}.weight"),
            vec![c_out, c_in, k, k],
            ParamKind::Weight,
            fan_in,
            activation,
            trainable,
        )?;
        let bias = self.push(
            format!("{name}.bias"),
            vec![c_out],
            ParamKind::Bias,
            fan_in,
            activation,
            trainable,
        )?;
        Ok(Unit::Conv {
            weight,
            bias,
            geom,
            activation,
            c_in,
            c_out,
        })
    }

    fn batchnorm(
        &mut self,
        name: &str,
        c: usize,
        activation: Activation,
        trainable: bool,
    ) -> Result<Unit> {
        let mut idx = [0usize; 4];
        let parts = [
            ("gamma", ParamKind::Gamma),
            ("beta", ParamKind::Beta),
            ("running_mean", ParamKind::RunningMean),
            ("running_var", ParamKind::RunningVar),
        ];
        for (slot, (suffix, kind)) in idx.iter_mut().zip(parts) {
            *slot = self.push(format!("{name}.{suffix}"), vec![c], kind, c, activation, trainable)?;
        }
        Ok(Unit::BatchNorm {
            gamma: idx[0],
            beta: idx[1],
            mean: idx[2],
            var: idx[3],
            activation,
        })
    }

    fn layer(
        &mut self,
        prefix: &str,
        layer: &LayerSpec,
        input: FeatureShape,
        units: &mut Vec<Unit>,
    ) -> Result<()> {
        let t = layer.trainable;
        let in_c = match input {
            FeatureShape::Spatial { channels, .. } => channels,
            FeatureShape::Flat(n) => n,
        };
        match layer.kind {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
                activation,
                repeat,
            } => {
                let geom = conv_geometry(kernel, stride, padding);
                let mut c = in_c;
                for r in 0..repeat {
                    units.push(self.conv(&format!("{prefix}.conv{r}"), c, filters, geom, activation, t)?);
                    c = filters;
                }
            }
            LayerKind::MaxPool(geom) => units.push(Unit::Pool(geom)),
            LayerKind::BatchNorm { activation } => {
                units.push(self.batchnorm(&format!("{prefix}.bn"), in_c, activation, t)?)
            }
            LayerKind::GlobalMaxPool => units.push(Unit::GlobalMaxPool),
            LayerKind::Flatten => units.push(Unit::Flatten),
            LayerKind::Dense { nodes, activation } => {
                let fan_in = input.numel();
                let weight = self.push(
                    format!("{prefix}.dense.weight"),
                    vec![fan_in, nodes],
                    ParamKind::Weight,
                    fan_in,
                    activation,
                    t,
                )?;
                let bias = self.push(
                    format!("{prefix}.dense.bias"),
                    vec![nodes],
                    ParamKind::Bias,
                    fan_in,
                    activation,
                    t,
                )?;
                units.push(Unit::Dense {
                    weight,
                    bias,
                    activation,
                });
            }
            LayerKind::ResidualBottleneck { mid, out, stride } => {
                let reduce = ConvGeometry {
                    kernel: 1,
                    stride,
                    pad: 0,
                };
                let point = ConvGeometry {
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                };
                let lin = Activation::Linear;
                let main = vec![
                    self.conv(&format!("{prefix}.conv1"), in_c, mid, reduce, lin, t)?,
                    self.batchnorm(&format!("{prefix}.bn1"), mid, Activation::Relu, t)?,
                    self.conv(&format!("{prefix}.conv2"), mid, mid, ConvGeometry::same(3), lin, t)?,
                    self.batchnorm(&format!("{prefix}.bn2"), mid, Activation::Relu, t)?,
                    self.conv(&format!("{prefix}.conv3"), mid, out, point, lin, t)?,
                    self.batchnorm(&format!("{prefix}.bn3"), out, lin, t)?,
                ];
                let shortcut = if needs_projection(in_c, out, &layer.kind) {
                    vec![
                        self.conv(&format!("{prefix}.shortcut_conv"), in_c, out, reduce, lin, t)?,
                        self.batchnorm(&format!("{prefix}.shortcut_bn"), out, lin, t)?,
                    ]
                } else {
                    Vec::new()
                };
                units.push(Unit::Residual { main, shortcut });
            }
        }
        Ok(())
    }
}

/// Train mode uses batch statistics in trainable batch-norm layers and
/// records activations for [`Model::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named gradients for trainable parameters.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    entries: Vec<(usize, String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(_, n, _)| n == name)
            .map(|(_, _, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(_, n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(_, n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `extra` to the gradient named `name`.
    pub fn accumulate(&mut self, name: &str, extra: &Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|(_, n, _)| n == name)
            .ok_or_else(|| Error::State(format!("no gradient entry for {name}")))?;
        entry.2 = entry.2.add(extra)?;
        Ok(())
    }

    pub(crate) fn indexed(&self) -> impl Iterator<Item = (usize, &str, &Tensor<T>)> {
        self.entries.iter().map(|(i, n, t)| (*i, n.as_str(), t))
    }

    pub(crate) fn from_entries(entries: Vec<(usize, String, Tensor<T>)>) -> Self {
        Gradients { entries }
    }
}

enum Cache<T> {
    Skipped,
    Conv {
        input: Tensor<T>,
        output: Option<Tensor<T>>,
    },
    Pool {
        winners: Vec<usize>,
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
    },
    BatchNorm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        output: Option<Tensor<T>>,
        batch_stats: bool,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    Dense {
        input: Tensor<T>,
        output: Option<Tensor<T>>,
    },
    Residual {
        main: Vec<Cache<T>>,
        shortcut: Vec<Cache<T>>,
        output: Tensor<T>,
    },
}

struct Recorded<T> {
    caches: Vec<Cache<T>>,
    batch: usize,
    output_shape: Vec<usize>,
}

/// An instantiated network: spec, named parameters, and cached activations
/// from the last training forward pass.
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<Param<T>>,
    units: Vec<Unit>,
    trace: Option<Recorded<T>>,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            params: self.params.clone(),
            units: self.units.clone(),
            trace: None,
        }
    }
}

impl<T: Scalar> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.spec.name)
            .field("params", &self.params.len())
            .finish()
    }
}

/// Draws fan-in scaled normal weights: variance `2 / fan_in` ahead of a ReLU,
/// `1 / fan_in` for linear outputs. Biases and shifts start at zero.
pub fn init_weights<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::instantiate(spec.clone(), |slot| initial_value(slot, &mut rng))
}

pub(crate) fn initial_value<T: Scalar>(slot: &ParamSlot, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    match slot.kind {
        ParamKind::Weight => {
            let gain = match slot.activation {
                Activation::Relu => 2.0,
                Activation::Linear => 1.0,
            };
            let std = (gain / slot.fan_in as f64).sqrt();
            Tensor::from_fn(slot.shape.clone(), |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
        }
        ParamKind::Gamma | ParamKind::RunningVar => Tensor::full(slot.shape.clone(), T::one()),
        ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => {
            Tensor::zeros(slot.shape.clone())
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model, asking `source` for every parameter tensor in layer order.
    pub fn instantiate(
        spec: ModelSpec,
        mut source: impl FnMut(&ParamSlot) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let shapes = propagate_shapes(&spec)?;
        let mut builder = Builder {
            params: Vec::new(),
            source: &mut source,
        };
        let [c, h, w] = spec.input_shape;
        let mut input = FeatureShape::Spatial {
            channels: c,
            height: h,
            width: w,
        };
        let mut units = Vec::new();
        for (i, (layer, out)) in spec.layers.iter().zip(&shapes).enumerate() {
            builder.layer(&spec.prefix(i), layer, input, &mut units)?;
            input = *out;
        }
        let params = builder.params;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = params.iter().find(|p| !seen.insert(p.name.as_str())) {
            return Err(Error::Config(format!("duplicate parameter name {}", dup.name)));
        }
        Ok(Model {
            spec,
            params,
            units,
            trace: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    /// Mutable parameter access; shapes and trainability are fixed, values are not.
    pub fn param_values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params
            .iter_mut()
            .map(|p| (p.name.as_str(), &mut p.value))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub(crate) fn param_at_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.params[index]
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Transfer {
                reason: "unknown parameter".into(),
                names: vec![name.to_string()],
            })?;
        if p.value.shape() != value.shape() {
            return Err(Error::Transfer {
                reason: format!(
                    "shape mismatch: model has {:?}, got {:?}",
                    p.value.shape(),
                    value.shape()
                ),
                names: vec![name.to_string()],
            });
        }
        p.value = value;
        self.trace = None;
        Ok(())
    }

    /// Counts from the allocated tensors and their trainable flags.
    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for p in &self.params {
            let n = p.value.len() as u64;
            c.total += n;
            if p.trainable {
                c.trainable += n;
            } else {
                c.frozen += n;
            }
        }
        c
    }

    pub fn is_backbone_param(&self, name: &str) -> bool {
        self.spec.backbone_len.is_some() && name.starts_with("backbone.")
    }

    /// Sets trainability of every backbone layer; statistics stay frozen.
    pub fn set_backbone_trainable(&mut self, trainable: bool) -> Result<()> {
        let b = self.spec.backbone_len.ok_or_else(|| {
            Error::Config(format!("model {} has no designated backbone", self.spec.name))
        })?;
        for layer in &mut self.spec.layers[..b] {
            layer.trainable = trainable;
        }
        for p in &mut self.params {
            if p.name.starts_with("backbone.") {
                p.trainable = trainable && !p.kind.is_statistic();
            }
        }
        self.trace = None;
        Ok(())
    }

    /// Weights of the final layer, the target of an output regularizer.
    pub fn output_weight_name(&self) -> Option<&str> {
        match self.units.last() {
            Some(Unit::Dense { weight, .. }) => Some(self.params[*weight].name.as_str()),
            _ => None,
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                    kind: p.kind,
                })
                .collect(),
            units: self.units.clone(),
            trace: None,
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let [c, h, w] = self.spec.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::dim(format!(
                "model {} expects a batch [n, {c}, {h}, {w}], got {:?}",
                self.spec.name,
                batch.shape()
            )));
        }
        Ok(batch.shape()[0])
    }

    /// Binary-task forward pass: one logit per example.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = self.forward_outputs(batch, mode)?;
        let (n, k) = (out.shape()[0], out.shape()[1]);
        if k != 1 {
            return Err(Error::dim(format!(
                "model {} has {k} outputs; use forward_outputs",
                self.spec.name
            )));
        }
        out.reshape(vec![n])
    }

    /// Forward pass returning `[n, outputs]`.
    pub fn forward_outputs(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.trace = None;
                self.predict(batch)
            }
            Mode::Train => {
                let n = self.check_batch(batch)?;
                let first = self.first_trainable_unit();
                let mut ctx = Ctx {
                    params: &self.params,
                    mode,
                    stat_updates: Vec::new(),
                };
                let mut caches = Vec::with_capacity(self.units.len());
                let mut x = batch.clone();
                for (i, unit) in self.units.iter().enumerate() {
                    let record = first.is_some_and(|f| i >= f);
                    let (y, cache) = forward_unit(unit, x, &mut ctx, record)?;
                    caches.push(cache);
                    x = y;
                }
                let updates = std::mem::take(&mut ctx.stat_updates);
                for (idx, values) in updates {
                    self.params[idx].value.data_mut().copy_from_slice(&values);
                }
                let out = flat_output(x, n)?;
                self.trace = Some(Recorded {
                    caches,
                    batch: n,
                    output_shape: out.shape().to_vec(),
                });
                Ok(out)
            }
        }
    }

    /// Evaluation-mode forward pass; a pure function of parameters and input.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_batch(batch)?;
        let mut ctx = Ctx {
            params: &self.params,
            mode: Mode::Eval,
            stat_updates: Vec::new(),
        };
        let mut x = batch.clone();
        for unit in &self.units {
            x = forward_unit(unit, x, &mut ctx, false)?.0;
        }
        flat_output(x, n)
    }

    /// Activations after the backbone segment, evaluation mode.
    pub fn backbone_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.spec.backbone_len.ok_or_else(|| {
            Error::Config(format!("model {} has no designated backbone", self.spec.name))
        })?;
        let n = self.check_batch(batch)?;
        let units_in_backbone = self.units_before_layer(b);
        let mut ctx = Ctx {
            params: &self.params,
            mode: Mode::Eval,
            stat_updates: Vec::new(),
        };
        let mut x = batch.clone();
        for unit in &self.units[..units_in_backbone] {
            x = forward_unit(unit, x, &mut ctx, false)?.0;
        }
        flat_output(x, n)
    }

    fn units_before_layer(&self, layer: usize) -> usize {
        self.spec.layers[..layer]
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv { repeat, .. } => repeat,
                _ => 1,
            })
            .sum()
    }

    fn first_trainable_unit(&self) -> Option<usize> {
        let mut idx = Vec::new();
        self.units.iter().position(|u| {
            idx.clear();
            u.param_indices(&mut idx);
            idx.iter().any(|&i| self.params[i].trainable)
        })
    }

    /// Back-propagates `upstream` (`[n]` or `[n, outputs]`) through the last
    /// training forward pass. Only trainable parameters receive gradients.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let trace = self.trace.take().ok_or_else(|| {
            Error::State("backward called without a matching training forward pass".into())
        })?;
        if upstream.len() != trace.output_shape.iter().product::<usize>()
            || upstream.shape()[0] != trace.batch
        {
            return Err(Error::dim(format!(
                "upstream gradient {:?} does not match model output {:?}",
                upstream.shape(),
                trace.output_shape
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut g = upstream.clone().reshape(trace.output_shape.clone())?;
        let first = self.first_trainable_unit();
        for (i, (unit, cache)) in self.units.iter().zip(trace.caches).enumerate().rev() {
            let Some(first) = first else { break };
            if i < first {
                break;
            }
            let need_input = i > first;
            match backward_unit(unit, cache, g, &self.params, &mut grads, need_input)? {
                Some(gx) => g = gx,
                None => break,
            }
        }
        let entries = grads
            .into_iter()
            .enumerate()
            .filter(|(i, _)| self.params[*i].trainable)
            .map(|(i, g)| {
                let t = match g {
                    Some(t) => t,
                    None => Tensor::zeros(self.params[i].value.shape().to_vec())?,
                };
                Ok((i, self.params[i].name.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients::from_entries(entries))
    }
}

fn flat_output<T: Scalar>(x: Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let per = x.len() / n;
    x.reshape(vec![n, per])
}

struct Ctx<'a, T> {
    params: &'a [Param<T>],
    mode: Mode,
    stat_updates: Vec<(usize, Vec<T>)>,
}

fn apply_activation<T: Scalar>(act: Activation, data: &mut [T]) {
    if act == Activation::Relu {
        data.iter_mut().for_each(|v| *v = relu(*v));
    }
}

fn mask_relu<T: Scalar>(grad: &mut Tensor<T>, output: &Option<Tensor<T>>) {
    if let Some(out) = output {
        for (g, &y) in grad.data_mut().iter_mut().zip(out.data()) {
            if y <= T::zero() {
                *g = T::zero();
            }
        }
    }
}

fn spatial_dims(x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!(
            "expected spatial activations [n,c,h,w], got {:?}",
            x.shape()
        ))),
    }
}

fn forward_unit<T: Scalar>(
    unit: &Unit,
    x: Tensor<T>,
    ctx: &mut Ctx<'_, T>,
    record: bool,
) -> Result<(Tensor<T>, Cache<T>)> {
    let params = ctx.params;
    match unit {
        Unit::Conv {
            weight,
            bias,
            geom,
            activation,
            c_out,
            c_in,
        } => {
            let (n, c, h, w) = spatial_dims(&x)?;
            let d = ConvDims::new(c, h, w, *c_out, *geom)
                .filter(|_| c == *c_in)
                .ok_or_else(|| Error::dim(format!("conv cannot accept {:?}", x.shape())))?;
            let per_out = d.c_out * d.oh * d.ow;
            let mut out = vec![T::zero(); n * per_out];
            let wv = params[*weight].value.data();
            let bv = params[*bias].value.data();
            conv_forward_batch(x.data(), n, wv, bv, &d, &mut out);
            apply_activation(*activation, &mut out);
            let y = Tensor::new(vec![n, d.c_out, d.oh, d.ow], out)?;
            let cache = if record {
                Cache::Conv {
                    input: x,
                    output: (*activation == Activation::Relu).then(|| y.clone()),
                }
            } else {
                Cache::Skipped
            };
            Ok((y, cache))
        }
        Unit::Pool(geom) => {
            let (n, c, h, w) = spatial_dims(&x)?;
            let (oh, ow) = geom
                .output_dims(h, w)
                .ok_or_else(|| Error::dim(format!("pooling cannot accept {:?}", x.shape())))?;
            let per_in = c * h * w;
            let per_out = c * oh * ow;
            let mut out = vec![T::zero(); n * per_out];
            let mut winners = vec![0usize; n * per_out];
            for i in 0..n {
                maxpool_image(
                    x.slab(i),
                    c,
                    h,
                    w,
                    *geom,
                    oh,
                    ow,
                    &mut out[i * per_out..(i + 1) * per_out],
                    &mut winners[i * per_out..(i + 1) * per_out],
                );
                winners[i * per_out..(i + 1) * per_out]
                    .iter_mut()
                    .for_each(|v| *v += i * per_in);
            }
            let y = Tensor::new(vec![n, c, oh, ow], out)?;
            let cache = if record {
                Cache::Pool {
                    winners,
                    in_shape: x.shape().to_vec(),
                    out_shape: y.shape().to_vec(),
                }
            } else {
                Cache::Skipped
            };
            Ok((y, cache))
        }
        Unit::GlobalMaxPool => {
            let (n, c, h, w) = spatial_dims(&x)?;
            let per_in = c * h * w;
            let mut out = vec![T::zero(); n * c];
            let mut winners = vec![0usize; n * c];
            for i in 0..n {
                global_max_pool_image(
                    x.slab(i),
                    c,
                    &mut out[i * c..(i + 1) * c],
                    &mut winners[i * c..(i + 1) * c],
                );
                winners[i * c..(i + 1) * c]
                    .iter_mut()
                    .for_each(|v| *v += i * per_in);
            }
            let y = Tensor::new(vec![n, c], out)?;
            let cache = if record {
                Cache::Pool {
                    winners,
                    in_shape: x.shape().to_vec(),
                    out_shape: vec![n, c],
                }
            } else {
                Cache::Skipped
            };
            Ok((y, cache))
        }
        Unit::Flatten => {
            let n = x.shape()[0];
            let in_shape = x.shape().to_vec();
            let per = x.len() / n;
            let y = x.reshape(vec![n, per])?;
            let cache = if record {
                Cache::Flatten { in_shape }
            } else {
                Cache::Skipped
            };
            Ok((y, cache))
        }
        Unit::Dense {
            weight,
            bias,
            activation,
        } => {
            let n = x.shape()[0];
            let fan_in = x.len() / n;
            let wt = &params[*weight].value;
            let nodes = wt.shape()[1];
            if wt.shape()[0] != fan_in {
                return Err(Error::dim(format!(
                    "dense layer with weights {:?} cannot accept {:?}",
                    wt.shape(),
                    x.shape()
                )));
            }
            let mut out = vec![T::zero(); n * nodes];
            gemm(
                MatRef::new(x.data(), n, fan_in),
                MatRef::new(wt.data(), fan_in, nodes),
                &mut out,
                false,
            );
            let bv = params[*bias].value.data();
            for row in out.chunks_exact_mut(nodes) {
                row.iter_mut().zip(bv).for_each(|(v, &b)| *v += b);
            }
            apply_activation(*activation, &mut out);
            let y = Tensor::new(vec![n, nodes], out)?;
            let cache = if record {
                Cache::Dense {
                    input: x.reshape(vec![n, fan_in])?,
                    output: (*activation == Activation::Relu).then(|| y.clone()),
                }
            } else {
                Cache::Skipped
            };
            Ok((y, cache))
        }
        Unit::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            activation,
        } => {
            let (n, c, h, w) = spatial_dims(&x)?;
            let plane = h * w;
            let batch_stats = ctx.mode == Mode::Train && params[*gamma].trainable;
            let eps = T::lit(BN_EPS);
            let (mu, sigma2) = if batch_stats {
                let m = T::from_usize(n * plane).unwrap();
                let mut mu = vec![T::zero(); c];
                let mut s2 = vec![T::zero(); c];
                for i in 0..n {
                    let img = x.slab(i);
                    for ch in 0..c {
                        mu[ch] += img[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
                    }
                }
                mu.iter_mut().for_each(|v| *v /= m);
                for i in 0..n {
                    let img = x.slab(i);
                    for ch in 0..c {
                        s2[ch] += img[ch * plane..(ch + 1) * plane]
                            .iter()
                            .map(|&v| (v - mu[ch]) * (v - mu[ch]))
                            .sum::<T>();
                    }
                }
                s2.iter_mut().for_each(|v| *v /= m);
                let mom = T::lit(BN_MOMENTUM);
                let keep = T::one() - mom;
                let new_mean = params[*mean]
                    .value
                    .data()
                    .iter()
                    .zip(&mu)
                    .map(|(&r, &b)| mom * r + keep * b)
                    .collect();
                let new_var = params[*var]
                    .value
                    .data()
                    .iter()
                    .zip(&s2)
                    .map(|(&r, &b)| mom * r + keep * b)
                    .collect();
                ctx.stat_updates.push((*mean, new_mean));
                ctx.stat_updates.push((*var, new_var));
                (mu, s2)
            } else {
                (
                    params[*mean].value.data().to_vec(),
                    params[*var].value.data().to_vec(),
                )
            };
            let inv_std: Vec<T> = sigma2.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let gv = params[*gamma].value.data();
            let bv = params[*beta].value.data();
            let mut xhat = x;
            let mut out = vec![T::zero(); xhat.len()];
            for i in 0..n {
                let src = xhat.slab_mut(i);
                let dst = &mut out[i * c * plane..(i + 1) * c * plane];
                for ch in 0..c {
                    for j in ch * plane..(ch + 1) * plane {
                        let z = (src[j] - mu[ch]) * inv_std[ch];
                        src[j] = z;
                        dst[j] = gv[ch] * z + bv[ch];
                    }
                }
            }
            apply_activation(*activation, &mut out);
            let y = Tensor::new(vec![n, c, h, w], out)?;
            let cache = if record {
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    output: (*activation == Activation::Relu).then(|| y.clone()),
                    batch_stats,
                }
            } else {
                Cache::Skipped
            };
            Ok((y, cache))
        }
        Unit::Residual { main, shortcut } => {
            let mut main_caches = Vec::with_capacity(main.len());
            let mut m = x.clone();
            for u in main {
                let (y, c) = forward_unit(u, m, ctx, record)?;
                main_caches.push(c);
                m = y;
            }
            let mut sc_caches = Vec::with_capacity(shortcut.len());
            let mut s = x;
            for u in shortcut {
                let (y, c) = forward_unit(u, s, ctx, record)?;
                sc_caches.push(c);
                s = y;
            }
            if m.shape() != s.shape() {
                return Err(Error::dim(format!(
                    "residual branches disagree: {:?} vs {:?}",
                    m.shape(),
                    s.shape()
                )));
            }
            let mut y = m;
            for (v, &r) in y.data_mut().iter_mut().zip(s.data()) {
                *v = relu(*v + r);
            }
            let cache = if record {
                Cache::Residual {
                    main: main_caches,
                    shortcut: sc_caches,
                    output: y.clone(),
                }
            } else {
                Cache::Skipped
            };
            Ok((y, cache))
        }
    }
}

fn add_grad<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    params: &[Param<T>],
    idx: usize,
    f: impl FnOnce(&mut [T]),
) -> Result<()> {
    if !params[idx].trainable {
        return Ok(());
    }
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor::zeros(params[idx].value.shape().to_vec())?);
    }
    f(grads[idx].as_mut().unwrap().data_mut());
    Ok(())
}

fn backward_unit<T: Scalar>(
    unit: &Unit,
    cache: Cache<T>,
    mut g: Tensor<T>,
    params: &[Param<T>],
    grads: &mut [Option<Tensor<T>>],
    need_input: bool,
) -> Result<Option<Tensor<T>>> {
    match (unit, cache) {
        (_, Cache::Skipped) => Err(Error::State("activation cache missing".into())),
        (
            Unit::Conv {
                weight,
                bias,
                geom,
                c_out,
                ..
            },
            Cache::Conv { input, output },
        ) => {
            mask_relu(&mut g, &output);
            let (n, c, h, w) = spatial_dims(&input)?;
            let d = ConvDims::new(c, h, w, *c_out, *geom)
                .ok_or_else(|| Error::dim("conv cache does not fit".to_string()))?;
            let wv = params[*weight].value.data();
            let mut gx = if need_input {
                Some(Tensor::zeros(input.shape().to_vec())?)
            } else {
                None
            };
            let train_w = params[*weight].trainable;
            let train_b = params[*bias].trainable;
            let mut gw = train_w.then(|| vec![T::zero(); wv.len()]);
            let mut gb = train_b.then(|| vec![T::zero(); *c_out]);
            conv_backward_batch(
                g.data(),
                input.data(),
                n,
                wv,
                &d,
                gw.as_deref_mut(),
                gb.as_deref_mut(),
                gx.as_mut().map(|t| t.data_mut()),
            );
            if let Some(gw) = gw {
                add_grad(grads, params, *weight, |dst| {
                    dst.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b)
                })?;
            }
            if let Some(gb) = gb {
                add_grad(grads, params, *bias, |dst| {
                    dst.iter_mut().zip(&gb).for_each(|(a, &b)| *a += b)
                })?;
            }
            Ok(gx)
        }
        (
            Unit::Pool(_) | Unit::GlobalMaxPool,
            Cache::Pool {
                winners,
                in_shape,
                out_shape,
            },
        ) => {
            if g.shape() != out_shape.as_slice() {
                return Err(Error::dim(format!(
                    "pooling gradient {:?} does not match recorded output {out_shape:?}",
                    g.shape()
                )));
            }
            if !need_input {
                return Ok(None);
            }
            let mut gx = Tensor::zeros(in_shape)?;
            let dst = gx.data_mut();
            for (&idx, &v) in winners.iter().zip(g.data()) {
                dst[idx] += v;
            }
            Ok(Some(gx))
        }
        (Unit::Flatten, Cache::Flatten { in_shape }) => Ok(Some(g.reshape(in_shape)?)),
        (
            Unit::Dense {
                weight, bias, ..
            },
            Cache::Dense { input, output },
        ) => {
            mask_relu(&mut g, &output);
            let (n, fan_in) = (input.shape()[0], input.shape()[1]);
            let nodes = params[*weight].value.shape()[1];
            let g = g.reshape(vec![n, nodes])?;
            add_grad(grads, params, *weight, |dst| {
                gemm(
                    MatRef::new(input.data(), n, fan_in).t(),
                    MatRef::new(g.data(), n, nodes),
                    dst,
                    true,
                )
            })?;
            add_grad(grads, params, *bias, |dst| {
                for row in g.data().chunks_exact(nodes) {
                    dst.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
            })?;
            if !need_input {
                return Ok(None);
            }
            let mut gx = vec![T::zero(); n * fan_in];
            gemm(
                MatRef::new(g.data(), n, nodes),
                MatRef::new(params[*weight].value.data(), fan_in, nodes).t(),
                &mut gx,
                false,
            );
            Ok(Some(Tensor::new(vec![n, fan_in], gx)?))
        }
        (
            Unit::BatchNorm { gamma, beta, .. },
            Cache::BatchNorm {
                xhat,
                inv_std,
                output,
                batch_stats,
            },
        ) => {
            mask_relu(&mut g, &output);
            let (n, c, h, w) = spatial_dims(&xhat)?;
            let plane = h * w;
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for i in 0..n {
                let gi = g.slab(i);
                let xi = xhat.slab(i);
                for ch in 0..c {
                    for j in ch * plane..(ch + 1) * plane {
                        sum_g[ch] += gi[j];
                        sum_gx[ch] += gi[j] * xi[j];
                    }
                }
            }
            add_grad(grads, params, *gamma, |dst| {
                dst.iter_mut().zip(&sum_gx).for_each(|(a, &b)| *a += b)
            })?;
            add_grad(grads, params, *beta, |dst| {
                dst.iter_mut().zip(&sum_g).for_each(|(a, &b)| *a += b)
            })?;
            if !need_input {
                return Ok(None);
            }
            let gv = params[*gamma].value.data();
            let m = T::from_usize(n * plane).unwrap();
            let mut gx = g;
            for i in 0..n {
                let gi = gx.slab_mut(i);
                let xi = xhat.slab(i);
                for ch in 0..c {
                    let scale = gv[ch] * inv_std[ch];
                    for j in ch * plane..(ch + 1) * plane {
                        gi[j] = if batch_stats {
                            scale * (gi[j] - sum_g[ch] / m - xi[j] * sum_gx[ch] / m)
                        } else {
                            scale * gi[j]
                        };
                    }
                }
            }
            Ok(Some(gx))
        }
        (
            Unit::Residual { main, shortcut },
            Cache::Residual {
                main: main_caches,
                shortcut: sc_caches,
                output,
            },
        ) => {
            mask_relu(&mut g, &Some(output));
            let mut gm = g.clone();
            for (u, c) in main.iter().zip(main_caches).rev() {
                gm = backward_unit(u, c, gm, params, grads, true)?
                    .ok_or_else(|| Error::State("residual branch lost its gradient".into()))?;
            }
            let mut gs = g;
            for (u, c) in shortcut.iter().zip(sc_caches).rev() {
                gs = backward_unit(u, c, gs, params, grads, true)?
                    .ok_or_else(|| Error::State("shortcut lost its gradient".into()))?;
            }
            if !need_input {
                return Ok(None);
            }
            Ok(Some(gm.add(&gs)?))
        }
        _ => Err(Error::State(
            "activation cache does not belong to this layer".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> ModelSpec {
        ModelSpec::new(
            "toy",
            [1, 4, 4],
            vec![
                LayerSpec::conv(2, 1),
                LayerSpec::maxpool2(),
                LayerSpec::flatten(),
                LayerSpec::dense(3, Activation::Relu),
                LayerSpec::dense(1, Activation::Linear),
            ],
        )
    }

    #[test]
    fn dense_on_flat_input() {
        let spec = ModelSpec::new(
            "d",
            [16, 1, 1],
            vec![LayerSpec::flatten(), LayerSpec::dense(1, Activation::Linear)],
        );
        let shapes = propagate_shapes(&spec).unwrap();
        assert_eq!(shapes.last(), Some(&FeatureShape::Flat(1)));
        assert_eq!(count_params(&spec).unwrap().total, 17);
    }

    #[test]
    fn dense_without_flatten_is_shape_error() {
        let spec = ModelSpec::new("bad", [3, 8, 8], vec![LayerSpec::dense(4, Activation::Relu)]);
        let err = propagate_shapes(&spec).unwrap_err();
        assert!(matches!(err, Error::Shape { ref layer, .. } if layer.contains("dense")), "{err}");
    }

    #[test]
    fn pool_on_tiny_input_is_shape_error() {
        let spec = ModelSpec::new("bad", [3, 1, 8], vec![LayerSpec::maxpool2()]);
        assert!(matches!(propagate_shapes(&spec), Err(Error::Shape { .. })));
    }

    #[test]
    fn first_conv_count() {
        let spec = ModelSpec::new("c", [3, 8, 8], vec![LayerSpec::conv(64, 1)]);
        assert_eq!(count_params(&spec).unwrap().total, 1_792);
    }

    #[test]
    fn batchnorm_counts_statistics_as_frozen() {
        let spec = ModelSpec::new("bn", [5, 4, 4], vec![LayerSpec::batchnorm(Activation::Relu)]);
        let c = count_params(&spec).unwrap();
        assert_eq!((c.total, c.trainable, c.frozen), (20, 10, 10));
        let m = init_weights::<f32>(&spec, 0).unwrap();
        assert_eq!(m.param_count(), c);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_weights::<f32>(&toy_spec(), 7).unwrap();
        let b = init_weights::<f32>(&toy_spec(), 7).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
            if p.kind == ParamKind::Bias {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
        let c = init_weights::<f32>(&toy_spec(), 8).unwrap();
        assert_ne!(a.params()[0].value, c.params()[0].value);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut m = init_weights::<f64>(&toy_spec(), 1).unwrap();
        let up = Tensor::zeros(vec![2]).unwrap();
        assert!(matches!(m.backward(&up), Err(Error::State(_))));
        let x = Tensor::zeros(vec![2, 1, 4, 4]).unwrap();
        m.forward(&x, Mode::Train).unwrap();
        m.backward(&up).unwrap();
        assert!(matches!(m.backward(&up), Err(Error::State(_))));
    }

    #[test]
    fn wrong_batch_shape_is_dimension_error() {
        let mut m = init_weights::<f32>(&toy_spec(), 1).unwrap();
        let x = Tensor::zeros(vec![2, 3, 4, 4]).unwrap();
        assert!(matches!(m.forward(&x, Mode::Eval), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut m = init_weights::<f64>(&toy_spec(), 3).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 4, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        m.forward(&x, Mode::Train).unwrap();
        let g = m.backward(&Tensor::zeros(vec![2]).unwrap()).unwrap();
        assert_eq!(g.len(), m.params().len());
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identical_examples_identical_logits() {
        let mut m = init_weights::<f32>(&toy_spec(), 5).unwrap();
        let one: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let batch: Vec<f32> = one.iter().cycle().take(48).copied().collect();
        let x = Tensor::new(vec![3, 1, 4, 4], batch).unwrap();
        let y = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data()[0], y.data()[1]);
        assert_eq!(y.data()[1], y.data()[2]);
    }
}
