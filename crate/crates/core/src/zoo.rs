//! The six reference architectures and the freeze/replace-head surgery used
//! for transfer learning.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    initial_value, propagate_shapes, Activation, FeatureShape, LayerKind, LayerSpec, Model,
    ModelSpec, Padding, Regularizer,
};
use crate::scalar::Scalar;
use crate::tensor::PoolGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Vgg7,
    Vgg10,
    CnnSvm,
    Vgg16Tl,
    Vgg19Tl,
    Resnet101Tl,
}

impl ModelId {
    /// Column order used in comparison tables: custom models, then pretrained.
    pub const ALL: [ModelId; 6] = [
        ModelId::Vgg7,
        ModelId::Vgg10,
        ModelId::CnnSvm,
        ModelId::Vgg16Tl,
        ModelId::Vgg19Tl,
        ModelId::Resnet101Tl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::Vgg7 => "vgg7",
            ModelId::Vgg10 => "vgg10",
            ModelId::CnnSvm => "cnn_svm",
            ModelId::Vgg16Tl => "vgg16_tl",
            ModelId::Vgg19Tl => "vgg19_tl",
            ModelId::Resnet101Tl => "resnet101_tl",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            ModelId::Vgg7 => "VGG-7",
            ModelId::Vgg10 => "VGG-10",
            ModelId::CnnSvm => "CNN-SVM",
            ModelId::Vgg16Tl => "VGG-16",
            ModelId::Vgg19Tl => "VGG-19",
            ModelId::Resnet101Tl => "ResNet101",
        }
    }

    /// Models built on a transferable backbone.
    pub fn is_backboned(&self) -> bool {
        matches!(self, ModelId::Vgg16Tl | ModelId::Vgg19Tl | ModelId::Resnet101Tl)
    }

    /// Default input as `(channels, height, width)`.
    pub fn default_input(&self) -> [usize; 3] {
        if self.is_backboned() {
            [3, 224, 224]
        } else {
            [3, 320, 240]
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model id {s:?}; expected one of {}",
                    ModelId::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }
}

/// VGG-style stack: each `(filters, convs)` block ends in a 2x2 pool.
pub fn vgg_blocks(blocks: &[(usize, usize)]) -> Vec<LayerSpec> {
    blocks
        .iter()
        .flat_map(|&(filters, repeat)| [LayerSpec::conv(filters, repeat), LayerSpec::maxpool2()])
        .collect()
}

const VGG16_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
const VGG19_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];

/// Bottleneck stage layout `(mid width, blocks)` for the 101-layer residual net.
const RESNET101_STAGES: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 23), (512, 3)];

/// Stem plus bottleneck stages; output has 2048 channels.
pub fn resnet101_layers() -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::new(LayerKind::Conv {
            filters: 64,
            kernel: 7,
            stride: 2,
            padding: Padding::Explicit(3),
            activation: Activation::Linear,
            repeat: 1,
        }),
        LayerSpec::batchnorm(Activation::Relu),
        LayerSpec::new(LayerKind::MaxPool(PoolGeometry {
            window: 3,
            stride: 2,
            pad: 1,
        })),
    ];
    for (stage, &(mid, blocks)) in RESNET101_STAGES.iter().enumerate() {
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(LayerSpec::bottleneck(mid, 4 * mid, stride));
        }
    }
    layers
}

/// Dense 512 (ReLU) into a single linear logit.
pub fn transfer_head() -> Vec<LayerSpec> {
    classifier_head(1)
}

fn classifier_head(outputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(512, Activation::Relu),
        LayerSpec::dense(outputs, Activation::Linear),
    ]
}

fn backboned(name: &str, input_shape: [usize; 3], mut backbone: Vec<LayerSpec>) -> ModelSpec {
    backbone.push(LayerSpec::global_max_pool());
    let backbone_len = backbone.len();
    let mut layers: Vec<LayerSpec> = backbone.into_iter().map(LayerSpec::frozen).collect();
    layers.extend(transfer_head());
    ModelSpec {
        backbone_len: Some(backbone_len),
        ..ModelSpec::new(name, input_shape, layers)
    }
}

/// Layer list for `id`. Backboned models come back with the backbone frozen.
pub fn build(id: ModelId, input_shape: [usize; 3]) -> Result<ModelSpec> {
    let [c, h, w] = input_shape;
    let min = if id.is_backboned() { 32 } else { 8 };
    if c == 0 || h < min || w < min {
        return Err(Error::Shape {
            layer: "input".into(),
            reason: format!("{id} needs at least {min}x{min} input, got {c}x{h}x{w}"),
        });
    }
    let dense_relu = |n| LayerSpec::dense(n, Activation::Relu);
    let out = LayerSpec::dense(1, Activation::Linear);
    let spec = match id {
        ModelId::Vgg7 => {
            let mut layers = vgg_blocks(&[(64, 2), (128, 2)]);
            layers.extend([LayerSpec::flatten(), dense_relu(16), dense_relu(16), out]);
            ModelSpec::new(id.as_str(), input_shape, layers)
        }
        ModelId::Vgg10 => {
            let mut layers = vgg_blocks(&[(64, 2), (128, 2), (256, 3)]);
            layers.extend([LayerSpec::flatten(), dense_relu(16), dense_relu(16), out]);
            ModelSpec::new(id.as_str(), input_shape, layers)
        }
        ModelId::CnnSvm => {
            let mut layers = vgg_blocks(&[(32, 1), (64, 1), (128, 1)]);
            layers.extend([LayerSpec::flatten(), dense_relu(16), out]);
            ModelSpec {
                output_regularizer: Regularizer::L2,
                ..ModelSpec::new(id.as_str(), input_shape, layers)
            }
        }
        ModelId::Vgg16Tl => backboned(id.as_str(), input_shape, vgg_blocks(&VGG16_BLOCKS)),
        ModelId::Vgg19Tl => backboned(id.as_str(), input_shape, vgg_blocks(&VGG19_BLOCKS)),
        ModelId::Resnet101Tl => backboned(id.as_str(), input_shape, resnet101_layers()),
    };
    spec.validate_binary()?;
    Ok(spec)
}

/// Same backbone as `spec` with a fresh `classes`-way head, fully trainable.
/// Used for surrogate pre-training of a backbone on a multi-class task.
pub fn with_classifier_head(spec: &ModelSpec, classes: usize) -> Result<ModelSpec> {
    let b = spec
        .backbone_len
        .ok_or_else(|| Error::Config(format!("model {} has no designated backbone", spec.name)))?;
    let mut layers: Vec<LayerSpec> = spec.layers[..b]
        .iter()
        .map(|l| LayerSpec {
            trainable: true,
            ..*l
        })
        .collect();
    layers.extend(classifier_head(classes));
    let out = ModelSpec {
        name: format!("{}_source{classes}", spec.name),
        layers,
        ..spec.clone()
    };
    propagate_shapes(&out)?;
    Ok(out)
}

/// Marks every backbone parameter untrainable. Idempotent.
pub fn freeze_base<T: Scalar>(mut model: Model<T>) -> Result<Model<T>> {
    model.set_backbone_trainable(false)?;
    Ok(model)
}

/// Discards the current head and attaches dense 512 (ReLU) + dense 1
/// (linear), freshly initialized from `seed`. Backbone tensors are moved
/// over untouched.
pub fn replace_head<T: Scalar>(model: Model<T>, feature_dim: usize, seed: u64) -> Result<Model<T>> {
    replace_head_with(model, feature_dim, transfer_head(), seed)
}

pub fn replace_head_with<T: Scalar>(
    model: Model<T>,
    feature_dim: usize,
    head: Vec<LayerSpec>,
    seed: u64,
) -> Result<Model<T>> {
    let spec = model.spec();
    let b = spec
        .backbone_len
        .ok_or_else(|| Error::Config(format!("model {} has no designated backbone", spec.name)))?;
    let backbone_spec = ModelSpec {
        layers: spec.layers[..b].to_vec(),
        ..spec.clone()
    };
    match propagate_shapes(&backbone_spec)?.last() {
        Some(FeatureShape::Flat(d)) if *d == feature_dim => {}
        other => {
            return Err(Error::Shape {
                layer: format!("{b} (head input)"),
                reason: format!(
                    "backbone yields {}, head expects a pooled vector of {feature_dim}",
                    other.map(|s| s.to_string()).unwrap_or_else(|| "nothing".into())
                ),
            })
        }
    }
    let mut layers = backbone_spec.layers.clone();
    layers.extend(head);
    let new_spec = ModelSpec {
        layers,
        ..spec.clone()
    };
    let mut old: std::collections::HashMap<String, _> = model
        .params()
        .iter()
        .filter(|p| p.name.starts_with("backbone."))
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    drop(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::instantiate(new_spec, |slot| match old.remove(&slot.name) {
        Some(t) => Ok(t),
        None => initial_value(slot, &mut rng),
    })
}
