//! One-vs-rest boosted decision stumps.
//!
//! Each class owns an AdaBoost sequence of depth-1 stumps separating it from
//! the rest. A stump votes for its class with weight `alpha` when it fires.
//! Confidences are Laplace-smoothed vote shares,
//! `(votes_c + 1) / (sum_k votes_k + C)`, so no class ever gets exactly zero.
//!
//! Blob payload:
//! `u32 d, u32 C, u32 rounds, u32 reservoir_cap, u64 updates_seen,
//!  u32 n_stumps, n_stumps x (u32 class, u32 feature, u8 polarity, f64 threshold, f64 alpha),
//!  u32 n_reservoir, n_reservoir x (f64[d] x, u32 label)`.
//! Polarity byte `1` fires when `x[feature] > threshold`, `0` when `<=`.

use rand::Rng as _;

use crate::codec::{self, Reader, Writer};
use crate::data::{Dataset, LabeledExample};
use crate::error::{LcflError, Result};
use crate::models::{check_input, check_training_set, ConfidenceModel, ModelKind, TrainConfig};
use crate::{par, rng};

pub const DEFAULT_ROUNDS: usize = 50;
pub const RESERVOIR_CAPACITY: usize = 512;
/// Weighted-error floor; caps a single stump's weight at about 2.3.
const ERROR_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Stump {
    pub class: usize,
    pub feature: usize,
    pub threshold: f64,
    /// `true` fires above the threshold, `false` at or below it.
    pub above: bool,
    pub alpha: f64,
}

impl Stump {
    pub fn fires(&self, x: &[f64]) -> bool {
        (x[self.feature] > self.threshold) == self.above
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StumpEnsemble {
    dim: usize,
    n_classes: usize,
    rounds: usize,
    reservoir_cap: usize,
    updates_seen: u64,
    stumps: Vec<Stump>,
    reservoir: Vec<LabeledExample>,
}

impl StumpEnsemble {
    pub fn new(dim: usize, n_classes: usize, rounds: usize) -> Result<Self> {
        if dim == 0 || n_classes < 2 || rounds == 0 {
            return Err(LcflError::invalid(
                "stumps need d >= 1, C >= 2 and rounds >= 1",
            ));
        }
        Ok(Self {
            dim,
            n_classes,
            rounds,
            reservoir_cap: RESERVOIR_CAPACITY,
            updates_seen: 0,
            stumps: Vec::new(),
            reservoir: Vec::new(),
        })
    }

    /// An ensemble with hand-set stumps.
    pub fn from_stumps(dim: usize, n_classes: usize, stumps: Vec<Stump>) -> Result<Self> {
        let mut m = Self::new(dim, n_classes, DEFAULT_ROUNDS)?;
        for s in &stumps {
            if s.class >= n_classes || s.feature >= dim {
                return Err(LcflError::invalid(
                    "stump refers to a missing class or feature",
                ));
            }
        }
        m.stumps = stumps;
        Ok(m)
    }

    pub fn stumps(&self) -> &[Stump] {
        &self.stumps
    }

    pub fn reservoir_len(&self) -> usize {
        self.reservoir.len()
    }

    /// Weighted votes per class, before smoothing.
    pub fn votes(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.dim)?;
        let mut votes = vec![0.0; self.n_classes];
        for s in &self.stumps {
            if s.fires(x) {
                votes[s.class] += s.alpha;
            }
        }
        Ok(votes)
    }

    /// Ensemble score of one class's booster in `[-A, A]`.
    fn score(&self, class: usize, x: &[f64]) -> f64 {
        self.stumps
            .iter()
            .filter(|s| s.class == class)
            .map(|s| if s.fires(x) { s.alpha } else { -s.alpha })
            .sum()
    }

    /// Runs `rounds` AdaBoost rounds per class on `data`, starting from the
    /// weights implied by the current ensemble.
    fn boost(&mut self, data: &[LabeledExample], rounds: usize) {
        let sorted = presort(data, self.dim);
        let this = &*self;
        let new: Vec<Vec<Stump>> = par::map_range(self.n_classes, |class| {
            let targets: Vec<f64> = data
                .iter()
                .map(|ex| if ex.y == class { 1.0 } else { -1.0 })
                .collect();
            let logw: Vec<f64> = data
                .iter()
                .zip(&targets)
                .map(|(ex, t)| -t * this.score(class, &ex.x))
                .collect();
            let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
            normalize(&mut weights);
            boost_class(class, data, &sorted, &targets, &mut weights, rounds)
        });
        for stumps in new {
            self.stumps.extend(stumps);
        }
    }

    fn absorb(&mut self, batch: &Dataset, seed: u64) {
        let mut rng = rng::seeded(rng::derive(seed, &[0x5E5, self.updates_seen]));
        for ex in batch {
            self.updates_seen += 1;
            if self.reservoir.len() < self.reservoir_cap {
                self.reservoir.push(ex.clone());
            } else {
                let j = rng.random_range(0..self.updates_seen);
                if (j as usize) < self.reservoir_cap {
                    self.reservoir[j as usize] = ex.clone();
                }
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, tag) = Reader::open(bytes)?;
        if tag != codec::tag::STUMPS {
            return Err(LcflError::Decode(format!(
                "expected stumps tag, got {tag:#04x}"
            )));
        }
        let dim = r.u32()?;
        let n_classes = r.u32()?;
        let rounds = r.u32()?;
        let mut m =
            Self::new(dim, n_classes, rounds).map_err(|e| LcflError::Decode(e.to_string()))?;
        m.reservoir_cap = r.u32()?;
        m.updates_seen = r.u64()?;
        let n_stumps = r.u32()?;
        for _ in 0..n_stumps {
            let class = r.u32()?;
            let feature = r.u32()?;
            let above = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(LcflError::Decode(format!("bad polarity byte {b}"))),
            };
            let threshold = r.f64()?;
            let alpha = r.f64()?;
            if class >= n_classes || feature >= dim {
                return Err(LcflError::Decode("stump index out of range".into()));
            }
            m.stumps.push(Stump {
                class,
                feature,
                threshold,
                above,
                alpha,
            });
        }
        let n_res = r.u32()?;
        for _ in 0..n_res {
            let x = r.f64s(dim)?;
            let y = r.u32()?;
            if y >= n_classes {
                return Err(LcflError::Decode("reservoir label out of range".into()));
            }
            m.reservoir.push(LabeledExample::new(x, y));
        }
        r.finish()?;
        Ok(m)
    }
}

fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
}

/// Per-feature example orderings.
fn presort(data: &[LabeledExample], dim: usize) -> Vec<Vec<usize>> {
    (0..dim)
        .map(|j| {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.sort_by(|&a, &b| data[a].x[j].total_cmp(&data[b].x[j]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

fn boost_class(
    class: usize,
    data: &[LabeledExample],
    sorted: &[Vec<usize>],
    targets: &[f64],
    weights: &mut [f64],
    rounds: usize,
) -> Vec<Stump> {
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let Some((mut stump, err)) = best_stump(class, data, sorted, targets, weights) else {
            break;
        };
        let err = err.clamp(ERROR_FLOOR, 1.0 - ERROR_FLOOR);
        if err >= 0.5 {
            break;
        }
        stump.alpha = 0.5 * ((1.0 - err) / err).ln();
        for ((w, ex), t) in weights.iter_mut().zip(data).zip(targets) {
            let h = if stump.fires(&ex.x) { 1.0 } else { -1.0 };
            *w *= (-stump.alpha * t * h).exp();
        }
        normalize(weights);
        out.push(stump);
    }
    out
}

/// Lowest weighted-error stump; ties resolved by feature, then scan order.
fn best_stump(
    class: usize,
    data: &[LabeledExample],
    sorted: &[Vec<usize>],
    targets: &[f64],
    weights: &[f64],
) -> Option<(Stump, f64)> {
    let pos_total: f64 = weights
        .iter()
        .zip(targets)
        .filter(|(_, &t)| t > 0.0)
        .map(|(w, _)| w)
        .sum();
    let neg_total: f64 = weights.iter().sum::<f64>() - pos_total;
    let mut best: Option<(Stump, f64)> = None;
    for (feature, order) in sorted.iter().enumerate() {
        let first = data[order[0]].x[feature];
        // error of "fire above t" with t below every value: all negatives wrong
        let mut pos_below = 0.0;
        let mut neg_below = 0.0;
        let mut consider = |threshold: f64, pos_below: f64, neg_below: f64| {
            let err_above = pos_below + (neg_total - neg_below);
            let err_below = 1.0 - err_above;
            for (above, err) in [(true, err_above), (false, err_below)] {
                if best.as_ref().is_none_or(|(_, e)| err < *e) {
                    best = Some((
                        Stump {
                            class,
                            feature,
                            threshold,
                            above,
                            alpha: 0.0,
                        },
                        err,
                    ));
                }
            }
        };
        consider(first - 1.0, 0.0, 0.0);
        for k in 0..order.len() {
            let i = order[k];
            if targets[i] > 0.0 {
                pos_below += weights[i];
            } else {
                neg_below += weights[i];
            }
            let v = data[i].x[feature];
            if let Some(&next) = order.get(k + 1) {
                let nv = data[next].x[feature];
                if nv > v {
                    consider(0.5 * (v + nv), pos_below, neg_below);
                }
            }
        }
    }
    best
}

impl ConfidenceModel for StumpEnsemble {
    fn kind(&self) -> ModelKind {
        ModelKind::Stumps
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn confidence(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut v = self.votes(x)?;
        let total: f64 = v.iter().sum();
        let denom = total + self.n_classes as f64;
        v.iter_mut().for_each(|c| *c = (*c + 1.0) / denom);
        Ok(v)
    }

    /// Rebuilds the ensemble with `rounds` rounds per class; `cfg.epochs`
    /// only acts as an on/off switch here.
    fn fit(&mut self, train: &Dataset, cfg: &TrainConfig) -> Result<()> {
        check_training_set(train, self.dim, self.n_classes)?;
        if cfg.epochs == 0 {
            return Ok(());
        }
        self.stumps.clear();
        self.reservoir.clear();
        self.updates_seen = 0;
        self.boost(train.examples(), self.rounds);
        Ok(())
    }

    /// Appends `cfg.epochs` rounds per class fitted on the batch mixed with
    /// the reservoir of earlier batches, then folds the batch into the
    /// reservoir.
    fn update(&mut self, batch: &Dataset, cfg: &TrainConfig) -> Result<()> {
        check_training_set(batch, self.dim, self.n_classes)?;
        if cfg.epochs == 0 {
            return Ok(());
        }
        let mut mix = self.reservoir.clone();
        mix.extend_from_slice(batch.examples());
        self.boost(&mix, cfg.epochs);
        self.absorb(batch, cfg.seed);
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(codec::tag::STUMPS);
        w.u32(self.dim)
            .u32(self.n_classes)
            .u32(self.rounds)
            .u32(self.reservoir_cap)
            .u64(self.updates_seen)
            .u32(self.stumps.len());
        for s in &self.stumps {
            w.u32(s.class)
                .u32(s.feature)
                .u8(s.above as u8)
                .f64(s.threshold)
                .f64(s.alpha);
        }
        w.u32(self.reservoir.len());
        for ex in &self.reservoir {
            w.f64s(&ex.x).u32(ex.y);
        }
        w.finish()
    }

    fn clone_box(&self) -> Box<dyn ConfidenceModel> {
        Box::new(self.clone())
    }
}
