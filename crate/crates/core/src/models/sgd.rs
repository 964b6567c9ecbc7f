use rand::seq::SliceRandom;

use crate::data::{Dataset, LabeledExample};
use crate::models::TrainConfig;
use crate::rng;

/// A model whose state is a flat parameter vector trained by gradient descent.
pub trait Parametric {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Mean cross-entropy over `batch` plus `l2 / 2 * ||params||^2`, evaluated
    /// at `params` (not necessarily the model's own). Writes the gradient into
    /// `grad`, which has the same length as `params`.
    fn loss_grad(
        &self,
        params: &[f64],
        batch: &[&LabeledExample],
        l2: f64,
        grad: &mut [f64],
    ) -> f64;
}

/// Proximal anchor `(mu / 2) * ||w - anchor||^2` added to the local objective.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a [f64],
    pub mu: f64,
}

/// Objective with the proximal term, and its gradient.
pub fn proximal_loss_grad<M: Parametric + ?Sized>(
    model: &M,
    params: &[f64],
    batch: &[&LabeledExample],
    l2: f64,
    prox: Proximal<'_>,
    grad: &mut [f64],
) -> f64 {
    let mut loss = model.loss_grad(params, batch, l2, grad);
    let mut sq = 0.0;
    for ((g, &w), &a) in grad.iter_mut().zip(params).zip(prox.anchor) {
        let diff = w - a;
        *g += prox.mu * diff;
        sq += diff * diff;
    }
    loss += 0.5 * prox.mu * sq;
    loss
}

/// Minibatch SGD over `data` for `cfg.epochs` epochs, reshuffling each epoch
/// from `cfg.seed`.
///
/// With a proximal anchor the quadratic term is applied as an exact proximal
/// step, `w <- (w - lr*g + lr*mu*anchor) / (1 + lr*mu)`, which stays stable
/// for arbitrarily large `mu`. With `mu == 0` the update is plain SGD.
pub fn train_sgd<M: Parametric + ?Sized>(
    model: &mut M,
    data: &Dataset,
    cfg: &TrainConfig,
    prox: Option<Proximal<'_>>,
) {
    let n = data.len();
    if n == 0 || cfg.epochs == 0 {
        return;
    }
    let prox = prox.filter(|p| p.mu > 0.0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; model.params().len()];
    let mut rng = rng::seeded(rng::derive(cfg.seed, &[0x56D]));
    let lr = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &data.examples()[i]).collect();
            let params = model.params().to_vec();
            model.loss_grad(&params, &batch, cfg.l2, &mut grad);
            let w = model.params_mut();
            match prox {
                None => {
                    for (wi, gi) in w.iter_mut().zip(&grad) {
                        *wi -= lr * gi;
                    }
                }
                Some(p) => {
                    let shrink = 1.0 + lr * p.mu;
                    for ((wi, gi), ai) in w.iter_mut().zip(&grad).zip(p.anchor) {
                        *wi = (*wi - lr * gi + lr * p.mu * ai) / shrink;
                    }
                }
            }
        }
    }
}
