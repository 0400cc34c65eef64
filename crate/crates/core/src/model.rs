//! Linear softmax classifier, distillation losses, and their exact gradients.
//!
//! Both the private local model and the shared proxy model are instances of
//! [`LinearModel`]. The proxy trains on `(1-alpha)*CE + alpha*KL(proxy||local)`
//! and the local model on `(1-beta)*CE + beta*KL(local||proxy)`, with the
//! partner model treated as a constant in each case. Gradients are derived by
//! hand for the linear-softmax composite; no autodiff.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid probability vector: {0}")]
    InvalidProbVector(String),
    #[error("invalid loss weights: {0}")]
    InvalidLossWeights(String),
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
}

/// Flat parameter vector of a model (weights row-major, then bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(len: usize) -> Self {
        WeightVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, factor: f64) -> WeightVector {
        WeightVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// Elementwise `self + other`. Panics on length mismatch; protocol code
    /// always works with vectors of one fixed architecture.
    pub fn add(&self, other: &WeightVector) -> WeightVector {
        assert_eq!(self.len(), other.len(), "weight vector length mismatch");
        WeightVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &WeightVector) -> WeightVector {
        assert_eq!(self.len(), other.len(), "weight vector length mismatch");
        WeightVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add_assign(&mut self, other: &WeightVector) {
        assert_eq!(self.len(), other.len(), "weight vector length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

impl std::ops::Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax output: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    /// Validates and wraps a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ModelError::InvalidProbVector(
                "entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidProbVector(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(ProbVector { probs })
    }

    /// Softmax of raw logits, with max subtraction for overflow safety.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        ProbVector {
            probs: exps.into_iter().map(|e| e / sum).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Mixing weights of the distillation losses plus the softmax temperature
/// used inside the KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the KL term in the proxy loss.
    pub alpha: f64,
    /// Weight of the KL term in the local loss.
    pub beta: f64,
    /// Temperature applied to both logit vectors inside the KL terms.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::InvalidLossWeights(format!(
                "alpha {} outside [0,1]",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(ModelError::InvalidLossWeights(format!(
                "beta {} outside [0,1]",
                self.beta
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(ModelError::InvalidLossWeights(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One training sample viewed by the loss functions.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub y: usize,
}

/// Linear classifier with a softmax output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    num_classes: usize,
    feature_dim: usize,
    /// Row-major `[num_classes x feature_dim]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        LinearModel {
            num_classes,
            feature_dim,
            weights: vec![0.0; num_classes * feature_dim],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Flat parameter count: `num_classes * feature_dim + num_classes`.
    pub fn param_len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn weight(&self, class: usize, dim: usize) -> f64 {
        self.weights[class * self.feature_dim + dim]
    }

    /// Flattens to weights-then-bias. Round-trips exactly with
    /// [`LinearModel::from_flat`].
    pub fn flatten(&self) -> WeightVector {
        let mut flat = Vec::with_capacity(self.param_len());
        flat.extend_from_slice(&self.weights);
        flat.extend_from_slice(&self.bias);
        WeightVector(flat)
    }

    pub fn from_flat(
        num_classes: usize,
        feature_dim: usize,
        flat: &WeightVector,
    ) -> Result<Self, ModelError> {
        let expected = num_classes * feature_dim + num_classes;
        if flat.len() != expected {
            return Err(ModelError::DimMismatch {
                expected,
                got: flat.len(),
            });
        }
        if !flat.is_finite() {
            return Err(ModelError::NonFinite("flat parameter vector"));
        }
        Ok(LinearModel {
            num_classes,
            feature_dim,
            weights: flat.0[..num_classes * feature_dim].to_vec(),
            bias: flat.0[num_classes * feature_dim..].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Raw class scores `W x + b`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.feature_dim {
            return Err(ModelError::DimMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        let mut z = self.bias.clone();
        for (k, zk) in z.iter_mut().enumerate() {
            let row = &self.weights[k * self.feature_dim..(k + 1) * self.feature_dim];
            *zk += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
        Ok(z)
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f64]) -> Result<ProbVector, ModelError> {
        Ok(ProbVector::from_logits(&self.logits(x)?))
    }

    /// Most likely class; ties break to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        let z = self.logits(x)?;
        let mut best = 0;
        for (k, &zk) in z.iter().enumerate() {
            if zk > z[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

fn ln_clamped(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Cross-entropy `-ln p[y]`, clamped so degenerate outputs stay finite.
pub fn cross_entropy(p: &ProbVector, y: usize) -> Result<f64, ModelError> {
    if y >= p.len() {
        return Err(ModelError::ClassOutOfRange {
            index: y,
            num_classes: p.len(),
        });
    }
    Ok(-ln_clamped(p.as_slice()[y]))
}

/// `KL(p || q) = sum_k p_k ln(p_k / q_k)`, with both logs floored at
/// [`PROB_FLOOR`]. Zero iff `p == q`; non-negative by Gibbs' inequality.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64, ModelError> {
    if p.len() != q.len() {
        return Err(ModelError::DimMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pk, &qk)| {
            if pk <= 0.0 {
                0.0
            } else {
                pk * (ln_clamped(pk) - ln_clamped(qk))
            }
        })
        .sum())
}

/// Gradient of the composite loss with respect to the logits of the trained
/// model on one sample:
///
/// ```text
/// (1-mix) * (p - onehot(y)) + mix * (1/T) * p .* (ln p - ln q - KL(p||q))
/// ```
///
/// where `p = softmax(z/T)`, `q = softmax(z_ref/T)` and the reference model
/// is constant. The CE term uses the unscaled softmax.
fn logit_gradient(
    z_train: &[f64],
    z_ref: &[f64],
    y: usize,
    mix: f64,
    temperature: f64,
) -> Vec<f64> {
    let c = z_train.len();
    let mut g = vec![0.0; c];

    if mix < 1.0 {
        let p = ProbVector::from_logits(z_train);
        for (k, gk) in g.iter_mut().enumerate() {
            let indicator = if k == y { 1.0 } else { 0.0 };
            *gk += (1.0 - mix) * (p.as_slice()[k] - indicator);
        }
    }

    if mix > 0.0 {
        let scaled_train: Vec<f64> = z_train.iter().map(|z| z / temperature).collect();
        let scaled_ref: Vec<f64> = z_ref.iter().map(|z| z / temperature).collect();
        let p = ProbVector::from_logits(&scaled_train);
        let q = ProbVector::from_logits(&scaled_ref);
        let kl: f64 = p
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .map(|(&pk, &qk)| {
                if pk <= 0.0 {
                    0.0
                } else {
                    pk * (ln_clamped(pk) - ln_clamped(qk))
                }
            })
            .sum();
        for (k, gk) in g.iter_mut().enumerate() {
            let pk = p.as_slice()[k];
            let term = if pk <= 0.0 {
                0.0
            } else {
                pk * (ln_clamped(pk) - ln_clamped(q.as_slice()[k]) - kl)
            };
            *gk += mix * term / temperature;
        }
    }

    g
}

/// Expands a logit gradient into a flat parameter gradient.
fn flat_gradient(g_logits: &[f64], x: &[f64]) -> WeightVector {
    let c = g_logits.len();
    let d = x.len();
    let mut flat = vec![0.0; c * d + c];
    for (k, &gk) in g_logits.iter().enumerate() {
        let row = &mut flat[k * d..(k + 1) * d];
        for (dst, &xi) in row.iter_mut().zip(x) {
            *dst = gk * xi;
        }
        flat[c * d + k] = gk;
    }
    WeightVector(flat)
}

fn composite_loss_one(
    train: &LinearModel,
    reference: &LinearModel,
    sample: Sample<'_>,
    mix: f64,
    temperature: f64,
) -> Result<f64, ModelError> {
    let z_train = train.logits(sample.x)?;
    let z_ref = reference.logits(sample.x)?;
    let ce = cross_entropy(&ProbVector::from_logits(&z_train), sample.y)?;
    let kl = if mix > 0.0 {
        let scaled_train: Vec<f64> = z_train.iter().map(|z| z / temperature).collect();
        let scaled_ref: Vec<f64> = z_ref.iter().map(|z| z / temperature).collect();
        kl_divergence(
            &ProbVector::from_logits(&scaled_train),
            &ProbVector::from_logits(&scaled_ref),
        )?
    } else {
        0.0
    };
    Ok((1.0 - mix) * ce + mix * kl)
}

fn check_batch(
    train: &LinearModel,
    reference: &LinearModel,
    batch: &[Sample<'_>],
) -> Result<(), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if reference.num_classes != train.num_classes || reference.feature_dim != train.feature_dim {
        return Err(ModelError::DimMismatch {
            expected: train.param_len(),
            got: reference.param_len(),
        });
    }
    for s in batch {
        if s.y >= train.num_classes {
            return Err(ModelError::ClassOutOfRange {
                index: s.y,
                num_classes: train.num_classes,
            });
        }
    }
    Ok(())
}

/// Per-sample gradients of the proxy loss
/// `(1-alpha)*CE(f_theta) + alpha*KL(f_theta || f_phi)` with `phi` constant.
///
/// One gradient per sample, in batch order; per-sample granularity is what
/// the DP clipping consumes.
pub fn proxy_loss_grads_per_sample(
    theta: &LinearModel,
    phi: &LinearModel,
    batch: &[Sample<'_>],
    lw: &LossWeights,
) -> Result<Vec<WeightVector>, ModelError> {
    lw.validate()?;
    check_batch(theta, phi, batch)?;
    batch
        .iter()
        .map(|s| {
            let z_theta = theta.logits(s.x)?;
            let z_phi = phi.logits(s.x)?;
            let g = logit_gradient(&z_theta, &z_phi, s.y, lw.alpha, lw.temperature);
            Ok(flat_gradient(&g, s.x))
        })
        .collect()
}

/// Mean proxy loss over a batch; the quantity the per-sample gradients
/// differentiate.
pub fn proxy_loss(
    theta: &LinearModel,
    phi: &LinearModel,
    batch: &[Sample<'_>],
    lw: &LossWeights,
) -> Result<f64, ModelError> {
    lw.validate()?;
    check_batch(theta, phi, batch)?;
    let total: f64 = batch
        .iter()
        .map(|s| composite_loss_one(theta, phi, *s, lw.alpha, lw.temperature))
        .sum::<Result<f64, _>>()?;
    Ok(total / batch.len() as f64)
}

/// Batch-mean gradient of the local loss
/// `(1-beta)*CE(f_phi) + beta*KL(f_phi || f_theta)` with `theta` constant.
///
/// The local path is noiseless, so batch granularity suffices.
pub fn local_loss_grad(
    phi: &LinearModel,
    theta: &LinearModel,
    batch: &[Sample<'_>],
    lw: &LossWeights,
) -> Result<WeightVector, ModelError> {
    lw.validate()?;
    check_batch(phi, theta, batch)?;
    let mut acc = WeightVector::zeros(phi.param_len());
    for s in batch {
        let z_phi = phi.logits(s.x)?;
        let z_theta = theta.logits(s.x)?;
        let g = logit_gradient(&z_phi, &z_theta, s.y, lw.beta, lw.temperature);
        acc.add_assign(&flat_gradient(&g, s.x));
    }
    Ok(acc.scale(1.0 / batch.len() as f64))
}

/// Mean local loss over a batch.
pub fn local_loss(
    phi: &LinearModel,
    theta: &LinearModel,
    batch: &[Sample<'_>],
    lw: &LossWeights,
) -> Result<f64, ModelError> {
    lw.validate()?;
    check_batch(phi, theta, batch)?;
    let total: f64 = batch
        .iter()
        .map(|s| composite_loss_one(phi, theta, *s, lw.beta, lw.temperature))
        .sum::<Result<f64, _>>()?;
    Ok(total / batch.len() as f64)
}

/// One SGD step: `new = old - lr * grad`, elementwise over the flat vector.
pub fn sgd_step(model: &LinearModel, grad: &WeightVector, lr: f64) -> Result<LinearModel, ModelError> {
    if !(lr > 0.0) {
        return Err(ModelError::BadLearningRate(lr));
    }
    if grad.len() != model.param_len() {
        return Err(ModelError::DimMismatch {
            expected: model.param_len(),
            got: grad.len(),
        });
    }
    let flat = model.flatten();
    let new = WeightVector(
        flat.0
            .iter()
            .zip(grad.as_slice())
            .map(|(w, g)| w - lr * g)
            .collect(),
    );
    LinearModel::from_flat(model.num_classes, model.feature_dim, &new)
}
