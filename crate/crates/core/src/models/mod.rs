//! Classifiers exposing per-class confidence vectors.
//!
//! Every model maps an input of dimension `d` to a probability vector of
//! length `C`. That shared contract is all the server relies on, so the
//! model families below can be mixed freely across clients.

mod logistic;
mod mlp;
mod sgd;
mod stumps;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use logistic::LogisticRegression;
pub use mlp::{Activation, Mlp, DEFAULT_HIDDEN};
pub use sgd::{proximal_loss_grad, train_sgd, Parametric, Proximal};
pub use stumps::{Stump, StumpEnsemble, DEFAULT_ROUNDS, RESERVOIR_CAPACITY};

use crate::codec::{self, Reader};
use crate::data::Dataset;
use crate::error::{LcflError, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 16,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_epochs(&self, epochs: usize) -> Self {
        Self {
            epochs,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LcflError::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(LcflError::invalid("batch_size must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(LcflError::invalid("l2 must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[serde(alias = "logistic", alias = "lr")]
    Logreg,
    Mlp,
    Stumps,
    /// Anything defined outside this crate.
    Custom,
}

impl ModelKind {
    /// Whether parameters can be averaged across clients.
    pub fn is_parametric(self) -> bool {
        matches!(self, ModelKind::Logreg | ModelKind::Mlp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Logreg => "logreg",
            ModelKind::Mlp => "mlp",
            ModelKind::Stumps => "stumps",
            ModelKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// A classifier that reports a confidence for every class.
pub trait ConfidenceModel: Send + Sync + fmt::Debug {
    fn kind(&self) -> ModelKind;

    fn dim(&self) -> usize;

    fn n_classes(&self) -> usize;

    /// Probability vector of length `n_classes()`.
    fn confidence(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Trains from a fresh initialization. `epochs == 0` leaves the model
    /// untouched.
    fn fit(&mut self, train: &Dataset, cfg: &TrainConfig) -> Result<()>;

    /// Continues training on `batch` only.
    fn update(&mut self, batch: &Dataset, cfg: &TrainConfig) -> Result<()>;

    fn to_bytes(&self) -> Vec<u8>;

    fn clone_box(&self) -> Box<dyn ConfidenceModel>;
}

impl Clone for Box<dyn ConfidenceModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Architecture choice for one client; fields irrelevant to `kind` are
/// ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: usize,
    pub activation: Activation,
    pub rounds: usize,
}

impl ModelSpec {
    pub fn logreg() -> Self {
        Self {
            kind: ModelKind::Logreg,
            hidden: DEFAULT_HIDDEN,
            activation: Activation::default(),
            rounds: DEFAULT_ROUNDS,
        }
    }

    pub fn mlp(hidden: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden,
            activation,
            ..Self::logreg()
        }
    }

    pub fn stumps(rounds: usize) -> Self {
        Self {
            kind: ModelKind::Stumps,
            rounds,
            ..Self::logreg()
        }
    }

    pub fn build(
        &self,
        dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Box<dyn ConfidenceModel>> {
        Ok(match self.kind {
            ModelKind::Logreg => Box::new(LogisticRegression::new(dim, n_classes)?),
            ModelKind::Mlp => Box::new(Mlp::new(
                dim,
                n_classes,
                self.hidden,
                self.activation,
                seed,
            )?),
            ModelKind::Stumps => Box::new(StumpEnsemble::new(dim, n_classes, self.rounds)?),
            ModelKind::Custom => {
                return Err(LcflError::Unsupported(
                    "custom models must be constructed by the caller".into(),
                ))
            }
        })
    }
}

/// Decodes any built-in model blob.
pub fn deserialize(bytes: &[u8]) -> Result<Box<dyn ConfidenceModel>> {
    let (_, tag) = Reader::open(bytes)?;
    Ok(match tag {
        codec::tag::LOGISTIC => Box::new(LogisticRegression::from_bytes(bytes)?),
        codec::tag::MLP => Box::new(Mlp::from_bytes(bytes)?),
        codec::tag::STUMPS => Box::new(StumpEnsemble::from_bytes(bytes)?),
        other => return Err(LcflError::Decode(format!("unknown model tag {other:#04x}"))),
    })
}

pub(crate) fn check_input(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(LcflError::DimensionMismatch {
            expected: dim,
            actual: x.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_training_set(ds: &Dataset, dim: usize, n_classes: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(LcflError::EmptyDataset("training set"));
    }
    if ds.dim() != dim {
        return Err(LcflError::DimensionMismatch {
            expected: dim,
            actual: ds.dim(),
        });
    }
    if ds.n_classes() != n_classes {
        return Err(LcflError::invalid(format!(
            "dataset has {} classes, model has {n_classes}",
            ds.n_classes()
        )));
    }
    Ok(())
}

/// In-place numerically stable softmax.
pub(crate) fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &dyn ConfidenceModel, x: &[f64]) -> Result<usize> {
    Ok(argmax(&model.confidence(x)?))
}

/// Fraction of `test` whose argmax confidence equals the label.
pub fn evaluate(model: &dyn ConfidenceModel, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(LcflError::EmptyDataset("test set"));
    }
    check_input(&test.examples()[0].x, model.dim())?;
    let correct = par::count(test.examples(), |ex| {
        predict(model, &ex.x).map(|p| p == ex.y).unwrap_or(false)
    });
    Ok(correct as f64 / test.len() as f64)
}

/// Mean negative log-likelihood of the labels.
pub fn cross_entropy(model: &dyn ConfidenceModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(LcflError::EmptyDataset("dataset"));
    }
    let losses = par::map(ds.examples(), |ex| {
        model
            .confidence(&ex.x)
            .map(|p| -p[ex.y].max(f64::MIN_POSITIVE).ln())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / ds.len() as f64)
}
