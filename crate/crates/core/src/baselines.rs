//! Aggregation-based baselines: FedAvg and FedProx over one shared
//! parametric architecture.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LcflError, Result};
use crate::models::{
    evaluate, train_sgd, ConfidenceModel, LogisticRegression, Mlp, ModelKind, ModelSpec,
    Parametric, Proximal, TrainConfig,
};
use crate::server::{Direction, Payload, TracePoint, TransmissionLedger};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FedMethod {
    FedAvg,
    FedProx,
}

impl std::fmt::Display for FedMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FedMethod::FedAvg => "fedavg",
            FedMethod::FedProx => "fedprox",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    /// Fraction of clients selected per round, in (0, 1].
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    /// Proximal coefficient; ignored by FedAvg.
    pub mu: f64,
    /// Trace every this many rounds; 0 disables the trace.
    pub trace_every: usize,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            client_fraction: 0.3,
            local_epochs: 5,
            learning_rate: 0.1,
            batch_size: 16,
            l2: 1e-4,
            mu: 0.0,
            trace_every: 10,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(LcflError::invalid("rounds must be positive"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(LcflError::invalid("client_fraction must lie in (0, 1]"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(LcflError::invalid("mu must be non-negative"));
        }
        self.local_train(0).validate()
    }

    /// `max(1, floor(fraction * n))`, never more than `n`.
    pub fn clients_per_round(&self, n_clients: usize) -> usize {
        let m = (self.client_fraction * n_clients as f64 + 1e-9).floor() as usize;
        m.clamp(1, n_clients.max(1))
    }

    fn local_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            l2: self.l2,
            seed,
        }
    }
}

/// The architectures aggregation can average.
#[derive(Debug, Clone, PartialEq)]
pub enum ParametricNet {
    Logreg(LogisticRegression),
    Mlp(Mlp),
}

impl ParametricNet {
    pub fn new(spec: &ModelSpec, dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        match spec.kind {
            ModelKind::Logreg => Ok(Self::Logreg(LogisticRegression::new(dim, n_classes)?)),
            ModelKind::Mlp => Ok(Self::Mlp(Mlp::new(
                dim,
                n_classes,
                spec.hidden,
                spec.activation,
                seed,
            )?)),
            other => Err(LcflError::Unsupported(format!(
                "{other} models cannot be averaged; federated baselines need logreg or mlp"
            ))),
        }
    }

    pub fn model(&self) -> &dyn ConfidenceModel {
        match self {
            Self::Logreg(m) => m,
            Self::Mlp(m) => m,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Logreg(m) => m.params(),
            Self::Mlp(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Logreg(m) => m.params_mut(),
            Self::Mlp(m) => m.params_mut(),
        }
    }

    /// SGD on `data`, optionally pulled toward `prox.anchor`.
    pub fn train(
        &mut self,
        data: &Dataset,
        cfg: &TrainConfig,
        prox: Option<Proximal<'_>>,
    ) -> Result<()> {
        let m = self.model();
        if data.is_empty() {
            return Err(LcflError::EmptyDataset("local shard"));
        }
        if data.dim() != m.dim() {
            return Err(LcflError::DimensionMismatch {
                expected: m.dim(),
                actual: data.dim(),
            });
        }
        match self {
            Self::Logreg(m) => train_sgd(m, data, cfg, prox),
            Self::Mlp(m) => train_sgd(m, data, cfg, prox),
        }
        Ok(())
    }
}

/// One client's share of a round: its id and private shard.
#[derive(Debug, Clone, Copy)]
pub struct Participant<'a> {
    pub id: usize,
    pub shard: &'a Dataset,
}

/// Participant `p`'s locally trained copy of `global` in round
/// `round_index`. FedAvg ignores `cfg.mu`.
pub fn local_update(
    method: FedMethod,
    global: &ParametricNet,
    p: Participant<'_>,
    cfg: &FedConfig,
    round_index: usize,
) -> Result<ParametricNet> {
    let mu = match method {
        FedMethod::FedAvg => 0.0,
        FedMethod::FedProx => cfg.mu,
    };
    let mut local = global.clone();
    let seed = rng::derive(cfg.seed, &[0xFED, round_index as u64, p.id as u64]);
    let prox = Proximal {
        anchor: global.params(),
        mu,
    };
    local.train(p.shard, &cfg.local_train(seed), Some(prox))?;
    Ok(local)
}

/// Broadcast, local training, size-weighted averaging. Records one
/// download and one upload per participant.
fn round(
    method: FedMethod,
    global: &ParametricNet,
    participants: &[Participant<'_>],
    cfg: &FedConfig,
    round_index: usize,
    ledger: &mut TransmissionLedger,
) -> Result<ParametricNet> {
    if participants.is_empty() {
        return Err(LcflError::invalid("a round needs at least one participant"));
    }
    let bytes = global.model().to_bytes().len();
    let locals = par::map(participants, |p| {
        local_update(method, global, *p, cfg, round_index)
    });
    let locals = locals.into_iter().collect::<Result<Vec<_>>>()?;

    let total: usize = participants.iter().map(|p| p.shard.len()).sum();
    let mut next = global.clone();
    let out = next.params_mut();
    out.iter_mut().for_each(|w| *w = 0.0);
    for (p, local) in participants.iter().zip(&locals) {
        let weight = p.shard.len() as f64 / total as f64;
        for (w, v) in out.iter_mut().zip(local.params()) {
            *w += weight * v;
        }
    }
    for p in participants {
        ledger.record(Direction::Download, Payload::Model, p.id, bytes);
        ledger.record(Direction::Upload, Payload::Model, p.id, bytes);
    }
    Ok(next)
}

pub fn fedavg_round(
    global: &ParametricNet,
    participants: &[Participant<'_>],
    cfg: &FedConfig,
    round_index: usize,
    ledger: &mut TransmissionLedger,
) -> Result<ParametricNet> {
    round(
        FedMethod::FedAvg,
        global,
        participants,
        cfg,
        round_index,
        ledger,
    )
}

pub fn fedprox_round(
    global: &ParametricNet,
    participants: &[Participant<'_>],
    cfg: &FedConfig,
    round_index: usize,
    ledger: &mut TransmissionLedger,
) -> Result<ParametricNet> {
    round(
        FedMethod::FedProx,
        global,
        participants,
        cfg,
        round_index,
        ledger,
    )
}

/// Client ids taking part in `round_index`, sorted.
pub fn select_clients(n_clients: usize, cfg: &FedConfig, round_index: usize) -> Vec<usize> {
    let m = cfg.clients_per_round(n_clients);
    let mut rng = rng::seeded(rng::derive(cfg.seed, &[0x5E1EC7, round_index as u64]));
    let mut ids = index::sample(&mut rng, n_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone)]
pub struct FedReport {
    pub method: FedMethod,
    pub global: ParametricNet,
    pub ledger: TransmissionLedger,
    /// Every client holds the broadcast model, so each trace point repeats
    /// the global accuracy once per client.
    pub trace: Vec<TracePoint>,
    pub selections: Vec<Vec<usize>>,
    pub final_accuracy: f64,
}

/// Runs `cfg.rounds` rounds starting from `initial`.
pub fn run_federated(
    method: FedMethod,
    initial: ParametricNet,
    shards: &[Dataset],
    test: &Dataset,
    cfg: &FedConfig,
) -> Result<FedReport> {
    cfg.validate()?;
    if shards.is_empty() {
        return Err(LcflError::invalid("need at least one client"));
    }
    if shards.iter().any(Dataset::is_empty) {
        return Err(LcflError::EmptyDataset("client shard"));
    }
    let n = shards.len();
    let mut global = initial;
    let mut ledger = TransmissionLedger::new();
    let mut trace = Vec::new();
    let mut selections = Vec::with_capacity(cfg.rounds);
    let point = |g: &ParametricNet, step: usize, t: usize| -> Result<TracePoint> {
        let acc = evaluate(g.model(), test)?;
        Ok(TracePoint {
            step,
            transmissions: t,
            accuracy: vec![acc; n],
            margin_loss: None,
        })
    };
    if cfg.trace_every > 0 {
        trace.push(point(&global, 0, 0)?);
    }
    for r in 0..cfg.rounds {
        let ids = select_clients(n, cfg, r);
        let participants: Vec<Participant<'_>> = ids
            .iter()
            .map(|&id| Participant {
                id,
                shard: &shards[id],
            })
            .collect();
        global = round(method, &global, &participants, cfg, r, &mut ledger)?;
        selections.push(ids);
        let done = r + 1;
        if cfg.trace_every > 0 && (done % cfg.trace_every == 0 || done == cfg.rounds) {
            trace.push(point(&global, done, ledger.model_transfers())?);
        }
    }
    let final_accuracy = evaluate(global.model(), test)?;
    Ok(FedReport {
        method,
        global,
        ledger,
        trace,
        selections,
        final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::models::{proximal_loss_grad, Activation};

    fn shards() -> Vec<Dataset> {
        let ds = make_blobs(30, 3, 2, 0.5, 4).unwrap();
        let idx: Vec<Vec<usize>> = (0..3)
            .map(|k| (0..ds.len()).filter(|i| i % 3 == k).collect())
            .collect();
        idx.iter().map(|i| ds.subset(i)).collect()
    }

    #[test]
    fn clients_per_round_uses_floor_with_minimum_one() {
        let cfg = FedConfig::default();
        assert_eq!(cfg.clients_per_round(7), 2);
        assert_eq!(cfg.clients_per_round(8), 2);
        assert_eq!(cfg.clients_per_round(1), 1);
        let all = FedConfig {
            client_fraction: 1.0,
            ..cfg
        };
        assert_eq!(all.clients_per_round(5), 5);
    }

    #[test]
    fn single_participant_round_is_the_local_model() {
        let s = shards();
        let cfg = FedConfig::default();
        let global = ParametricNet::new(&ModelSpec::mlp(8, Activation::Tanh), 2, 3, 1).unwrap();
        let mut ledger = TransmissionLedger::new();
        let agg = fedavg_round(
            &global,
            &[Participant {
                id: 1,
                shard: &s[1],
            }],
            &cfg,
            0,
            &mut ledger,
        )
        .unwrap();
        let mut local = global.clone();
        let seed = rng::derive(cfg.seed, &[0xFED, 0, 1]);
        local.train(&s[1], &cfg.local_train(seed), None).unwrap();
        assert_eq!(agg, local);
        assert_eq!(ledger.model_transfers(), 2);
    }

    #[test]
    fn equal_sizes_average_elementwise() {
        let s = shards();
        let cfg = FedConfig {
            local_epochs: 2,
            ..FedConfig::default()
        };
        let global = ParametricNet::new(&ModelSpec::logreg(), 2, 3, 0).unwrap();
        let parts = [
            Participant {
                id: 0,
                shard: &s[0],
            },
            Participant {
                id: 2,
                shard: &s[2],
            },
        ];
        assert_eq!(s[0].len(), s[2].len());
        let agg = fedavg_round(&global, &parts, &cfg, 3, &mut TransmissionLedger::new()).unwrap();
        let local = |p: &Participant<'_>| {
            let mut m = global.clone();
            m.train(
                p.shard,
                &cfg.local_train(rng::derive(cfg.seed, &[0xFED, 3, p.id as u64])),
                None,
            )
            .unwrap();
            m
        };
        let (p, q) = (local(&parts[0]), local(&parts[1]));
        for ((a, x), y) in agg.params().iter().zip(p.params()).zip(q.params()) {
            assert!((a - (x + y) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stumps_are_rejected() {
        let err = ParametricNet::new(&ModelSpec::stumps(10), 2, 3, 0).unwrap_err();
        assert!(matches!(err, LcflError::Unsupported(_)));
    }

    #[test]
    fn zero_mu_prox_matches_fedavg_trajectory() {
        let s = shards();
        let test = make_blobs(20, 3, 2, 0.5, 4).unwrap();
        let cfg = FedConfig {
            rounds: 3,
            client_fraction: 0.67,
            ..FedConfig::default()
        };
        let init = ParametricNet::new(&ModelSpec::mlp(8, Activation::Tanh), 2, 3, 5).unwrap();
        let a = run_federated(FedMethod::FedAvg, init.clone(), &s, &test, &cfg).unwrap();
        let b = run_federated(FedMethod::FedProx, init, &s, &test, &cfg).unwrap();
        assert_eq!(a.global, b.global);
        assert_eq!(a.selections, b.selections);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn huge_mu_pins_local_parameters() {
        let s = shards();
        let cfg = FedConfig {
            local_epochs: 1,
            mu: 1e6,
            ..FedConfig::default()
        };
        let global = ParametricNet::new(&ModelSpec::mlp(8, Activation::Relu), 2, 3, 9).unwrap();
        let mut local = global.clone();
        let anchor = global.params().to_vec();
        local
            .train(
                &s[0],
                &cfg.local_train(1),
                Some(Proximal {
                    anchor: &anchor,
                    mu: cfg.mu,
                }),
            )
            .unwrap();
        let moved = local
            .params()
            .iter()
            .zip(&anchor)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(moved < 1e-3, "moved {moved}");
    }

    #[test]
    fn ledger_counts_two_per_participant_per_round() {
        let s = shards();
        let test = s[0].clone();
        let cfg = FedConfig {
            rounds: 4,
            client_fraction: 1.0,
            local_epochs: 1,
            ..FedConfig::default()
        };
        let init = ParametricNet::new(&ModelSpec::logreg(), 2, 3, 0).unwrap();
        let r = run_federated(FedMethod::FedAvg, init, &s, &test, &cfg).unwrap();
        assert_eq!(r.ledger.model_transfers(), 4 * 3 * 2);
        assert_eq!(r.trace.last().unwrap().transmissions, 24);
    }

    #[test]
    fn selection_is_seeded_and_without_replacement() {
        let cfg = FedConfig::default();
        for r in 0..20 {
            let a = select_clients(7, &cfg, r);
            assert_eq!(a, select_clients(7, &cfg, r));
            assert_eq!(a.len(), 2);
            assert!(a[0] < a[1] && a[1] < 7);
        }
    }

    #[test]
    fn proximal_gradient_adds_pull_toward_anchor() {
        let s = shards();
        let net = ParametricNet::new(&ModelSpec::logreg(), 2, 3, 0).unwrap();
        let ParametricNet::Logreg(m) = &net else {
            unreachable!()
        };
        let batch: Vec<_> = s[0].iter().collect();
        let params: Vec<f64> = (0..m.params().len()).map(|i| 0.1 * i as f64).collect();
        let anchor = vec![0.0; params.len()];
        let mut g0 = vec![0.0; params.len()];
        let mut g1 = vec![0.0; params.len()];
        let l0 = m.loss_grad(&params, &batch, 0.0, &mut g0);
        let l1 = proximal_loss_grad(
            m,
            &params,
            &batch,
            0.0,
            Proximal {
                anchor: &anchor,
                mu: 2.0,
            },
            &mut g1,
        );
        let sq: f64 = params.iter().map(|w| w * w).sum();
        assert!((l1 - l0 - sq).abs() < 1e-12);
        for ((a, b), w) in g1.iter().zip(&g0).zip(&params) {
            assert!((a - b - 2.0 * w).abs() < 1e-12);
        }
    }
}
