//! Training objectives and first-order optimizers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch loss: `scalar` is the mean of `per_example` plus any regularization.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub scalar: T,
    pub per_example: Tensor<T>,
}

fn logits_vector<T: Scalar>(logits: &Tensor<T>, n_labels: usize, op: &str) -> Result<usize> {
    let n = logits.len();
    if logits.shape()[0] != n || n != n_labels {
        return Err(Error::dim(format!(
            "{op}: logits {:?} do not match {n_labels} labels",
            logits.shape()
        )));
    }
    Ok(n)
}

/// Sigmoid cross-entropy on raw logits with labels in `{0, 1}`.
///
/// Per example: `max(z, 0) - z*y + ln(1 + e^-|z|)`. The returned gradient is
/// with respect to the logits of the mean loss.
pub fn bce_with_logits<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
) -> Result<(LossValue<T>, Tensor<T>)> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!(
            "binary cross-entropy needs labels in {{0,1}}, got {bad}"
        )));
    }
    let n = logits_vector(logits, labels.len(), "bce_with_logits")?;
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut per = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    for (&z, &l) in logits.data().iter().zip(labels) {
        let y = if l == 1 { T::one() } else { T::zero() };
        let loss = z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        per.push(loss);
        grad.push((sigmoid(z) - y) * inv_n);
    }
    let per_example = Tensor::new(vec![n], per)?;
    let scalar = per_example.sum() * inv_n;
    Ok((
        LossValue {
            scalar,
            per_example,
        },
        Tensor::new(vec![n], grad)?,
    ))
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Gradients of [`hinge_l2`].
#[derive(Clone, Debug)]
pub struct HingeGrads<T> {
    pub logits: Tensor<T>,
    pub head_weights: Tensor<T>,
}

/// Mean hinge loss `max(0, 1 - y*z)` with labels in `{-1, +1}`, plus
/// `lambda * ||w||^2` on the head weights. The subgradient at the hinge
/// point is 0.
pub fn hinge_l2<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[i8],
    head_weights: &Tensor<T>,
    lambda: T,
) -> Result<(LossValue<T>, HingeGrads<T>)> {
    if !(lambda >= T::zero()) {
        return Err(Error::Validation(format!(
            "L2 coefficient must be >= 0, got {lambda}"
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
        return Err(Error::Validation(format!(
            "hinge loss needs labels in {{-1,+1}}, got {bad}"
        )));
    }
    let n = logits_vector(logits, labels.len(), "hinge_l2")?;
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut per = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    for (&z, &l) in logits.data().iter().zip(labels) {
        let y = T::from_i8(l).unwrap();
        let slack = T::one() - y * z;
        if slack > T::zero() {
            per.push(slack);
            grad.push(-y * inv_n);
        } else {
            per.push(T::zero());
            grad.push(T::zero());
        }
    }
    let per_example = Tensor::new(vec![n], per)?;
    let scalar = per_example.sum() * inv_n + lambda * head_weights.sum_squares();
    Ok((
        LossValue {
            scalar,
            per_example,
        },
        HingeGrads {
            logits: Tensor::new(vec![n], grad)?,
            head_weights: head_weights.scale(lambda + lambda),
        },
    ))
}

/// Softmax cross-entropy over `[n, classes]` logits with integer labels.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(LossValue<T>, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim(format!(
            "softmax_cross_entropy: logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!(
            "class label {bad} out of range for {k} outputs"
        )));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut per = Vec::with_capacity(n);
    let mut grad = vec![T::zero(); n * k];
    for (i, (row, &label)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&z| (z - max).exp()).sum();
        per.push(denom.ln() + max - row[label]);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / denom;
            let y = if j == label { T::one() } else { T::zero() };
            grad[i * k + j] = (p - y) * inv_n;
        }
    }
    let per_example = Tensor::new(vec![n], per)?;
    let scalar = per_example.sum() * inv_n;
    Ok((
        LossValue {
            scalar,
            per_example,
        },
        Tensor::new(vec![n, k], grad)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        #[serde(default = "default_sgd_lr")]
        learning_rate: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_adam_lr")]
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
}

fn default_sgd_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_adam_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-7
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(default_adam_lr())
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig::SgdMomentum {
            learning_rate,
            momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum {
                learning_rate,
                momentum,
            } => learning_rate > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                learning_rate > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && epsilon > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

struct Moments<T> {
    first: Tensor<T>,
    second: Option<Tensor<T>>,
}

/// Optimizer hyperparameters plus per-parameter moment tensors.
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    step_count: u64,
    moments: HashMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to the trainable parameters named in `grads`.
    /// A gradient for a frozen or unknown parameter is rejected before any
    /// parameter is written.
    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>) -> Result<()> {
        for (idx, name, g) in grads.indexed() {
            let p = model.params().get(idx).filter(|p| p.name == name).ok_or_else(|| {
                Error::State(format!("gradient {name} does not belong to this model"))
            })?;
            if !p.trainable {
                return Err(Error::State(format!(
                    "gradient supplied for frozen parameter {name}"
                )));
            }
            if p.value.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for (idx, name, g) in grads.indexed() {
            let param = &mut model.param_at_mut(idx).value;
            let m = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    first: Tensor::zeros(g.shape().to_vec()).expect("gradient shape is valid"),
                    second: matches!(self.config, OptimizerConfig::Adam { .. })
                        .then(|| Tensor::zeros(g.shape().to_vec()).expect("gradient shape is valid")),
                });
            match self.config {
                OptimizerConfig::SgdMomentum {
                    learning_rate,
                    momentum,
                } => {
                    let (mu, lr) = (T::lit(momentum), T::lit(learning_rate));
                    let v = m.first.data_mut();
                    for ((p, v), &g) in param.data_mut().iter_mut().zip(v).zip(g.data()) {
                        *v = mu * *v - lr * g;
                        *p += *v;
                    }
                }
                OptimizerConfig::Adam {
                    learning_rate,
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    let (lr, eps) = (T::lit(learning_rate), T::lit(epsilon));
                    let second = m.second.as_mut().expect("adam keeps second moments");
                    let iter = param
                        .data_mut()
                        .iter_mut()
                        .zip(m.first.data_mut())
                        .zip(second.data_mut())
                        .zip(g.data());
                    for (((p, m1), m2), &g) in iter {
                        *m1 = b1 * *m1 + (T::one() - b1) * g;
                        *m2 = b2 * *m2 + (T::one() - b2) * g * g;
                        let mhat = *m1 / c1;
                        let vhat = *m2 / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
