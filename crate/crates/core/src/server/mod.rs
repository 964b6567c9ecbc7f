//! The loosely coupled workflow: local pre-training and one-shot upload of
//! models and generators, server-side margin-driven selection and
//! retraining, then download and local fine-tuning.
//!
//! The server never touches a client's private shard. Shards live inside
//! [`Client`] behind [`PrivateShard`], and only the client-side phases
//! ([`pretrain_and_upload`], [`finetune_and_download`]) read them.

mod ledger;
mod selection;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use ledger::{Direction, Payload, TransferEvent, TransmissionLedger};
pub use selection::{
    contribution_counts, selection_loop, write_records_jsonl, ClientSampler, Contribution,
    LoopOutcome, SelectionRecord, TracePoint,
};

use crate::data::{Dataset, LabeledExample};
use crate::error::{LcflError, Result};
use crate::generators::{fit_gmm, fit_kde, privatize, DpParams, Generator};
use crate::margin::ModelSet;
use crate::models::{evaluate, predict, ConfidenceModel, TrainConfig};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcflConfig {
    /// Transmission limit `N`.
    pub iterations: usize,
    /// Pending examples that trigger a recipient's retraining.
    pub update_threshold: usize,
    pub update_epochs: usize,
    /// `None` draws twice the client's shard size.
    pub artificial_per_client: Option<usize>,
    pub finetune_epochs: usize,
    pub finetune_replay_fraction: f64,
    /// Total loop passes allowed, transmitting or not. `None` means `50 * N`.
    pub safety_cap: Option<usize>,
    /// Trace granularity in transmissions; `0` disables tracing.
    pub trace_every: usize,
    /// Also mix the recipient's own artificial dataset into each update.
    pub mix_own_artificial: bool,
    /// Replace generator labels with a shard-size-weighted vote of the
    /// uploaded models before the loop.
    pub relabel_with_ensemble: bool,
    pub seed: u64,
}

impl Default for LcflConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            update_threshold: 16,
            update_epochs: 5,
            artificial_per_client: None,
            finetune_epochs: 5,
            finetune_replay_fraction: 1.0,
            safety_cap: None,
            trace_every: 10,
            mix_own_artificial: false,
            relabel_with_ensemble: false,
            seed: 0,
        }
    }
}

impl LcflConfig {
    pub fn safety_cap(&self) -> usize {
        self.safety_cap.unwrap_or(50 * self.iterations.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.update_threshold == 0 {
            return Err(LcflError::Config(
                "update_threshold must be positive".into(),
            ));
        }
        if self.update_epochs == 0 {
            return Err(LcflError::Config("update_epochs must be positive".into()));
        }
        if self.artificial_per_client == Some(0) {
            return Err(LcflError::Config(
                "artificial_per_client must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.finetune_replay_fraction) {
            return Err(LcflError::Config(
                "finetune_replay_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.safety_cap() < self.iterations {
            return Err(LcflError::Config("safety_cap must be >= iterations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorSpec {
    Gmm {
        components_per_class: usize,
        #[serde(default)]
        dp: Option<DpParams>,
    },
    Kde {
        bandwidth: f64,
    },
}

impl GeneratorSpec {
    pub fn fit(&self, shard: &Dataset, seed: u64) -> Result<Generator> {
        match self {
            GeneratorSpec::Gmm {
                components_per_class,
                dp,
            } => {
                let g = fit_gmm(shard, *components_per_class, seed)?;
                match dp {
                    Some(dp) => privatize(&g, dp, rng::derive(seed, &[0xD0])),
                    None => Ok(g),
                }
            }
            GeneratorSpec::Kde { bandwidth } => fit_kde(shard, *bandwidth, seed),
        }
    }
}

/// A client's private data. Every read is counted so tests can prove which
/// phases access it.
#[derive(Debug)]
pub struct PrivateShard {
    data: Dataset,
    reads: Arc<AtomicUsize>,
}

impl PrivateShard {
    pub fn new(data: Dataset) -> Self {
        Self {
            data,
            reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn read(&self) -> &Dataset {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.data
    }

    /// Shard size is shared with the server and does not count as a read.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Handle on the read counter.
    pub fn read_probe(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.reads)
    }
}

#[derive(Debug)]
pub struct Client {
    pub id: usize,
    shard: PrivateShard,
    pub model: Box<dyn ConfidenceModel>,
    pub generator: GeneratorSpec,
    pub train: TrainConfig,
}

impl Client {
    pub fn new(
        id: usize,
        shard: Dataset,
        model: Box<dyn ConfidenceModel>,
        generator: GeneratorSpec,
        train: TrainConfig,
    ) -> Self {
        Self {
            id,
            shard: PrivateShard::new(shard),
            model,
            generator,
            train,
        }
    }

    pub fn shard(&self) -> &PrivateShard {
        &self.shard
    }

    pub fn local_accuracy(&self) -> Result<f64> {
        evaluate(self.model.as_ref(), self.shard.read())
    }
}

/// What the server holds after the upload phase. Position `k` in every
/// vector belongs to client id `k`.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub models: ModelSet,
    pub generators: Vec<Generator>,
    pub sizes: Vec<usize>,
    pub train: Vec<TrainConfig>,
}

fn check_clients(clients: &[Client]) -> Result<()> {
    if clients.is_empty() {
        return Err(LcflError::invalid("need at least one client"));
    }
    for (k, c) in clients.iter().enumerate() {
        if c.id != k {
            return Err(LcflError::invalid(format!(
                "client ids must be 0..n in order; position {k} has id {}",
                c.id
            )));
        }
        if c.shard.is_empty() {
            return Err(LcflError::EmptyDataset("client shard"));
        }
    }
    Ok(())
}

/// Each client fits its model and generator on its own shard, then uploads
/// both. Records two transfers per client.
pub fn pretrain_and_upload(
    clients: &mut [Client],
    cfg: &LcflConfig,
    ledger: &mut TransmissionLedger,
) -> Result<ServerState> {
    check_clients(clients)?;
    let seed = cfg.seed;
    let fitted = par::map_mut(clients, |_, c| -> Result<Generator> {
        let shard = c.shard.read();
        c.model.fit(shard, &c.train)?;
        Ok(c.generator
            .fit(shard, rng::derive(seed, &[0x6E, c.id as u64]))?
            .with_client_id(c.id))
    });
    let mut generators = Vec::with_capacity(clients.len());
    let mut members = Vec::with_capacity(clients.len());
    for (c, gen) in clients.iter().zip(fitted) {
        let gen = gen?;
        ledger.record(
            Direction::Upload,
            Payload::Model,
            c.id,
            c.model.to_bytes().len(),
        );
        ledger.record(
            Direction::Upload,
            Payload::Generator,
            c.id,
            gen.to_bytes().len(),
        );
        members.push((c.id, c.model.clone_box()));
        generators.push(gen);
    }
    Ok(ServerState {
        models: ModelSet::new(members)?,
        generators,
        sizes: clients.iter().map(|c| c.shard.len()).collect(),
        train: clients.iter().map(|c| c.train.clone()).collect(),
    })
}

/// Draws the artificial dataset of every client from its generator.
pub fn materialize_artificial(
    generators: &[Generator],
    sizes: &[usize],
    cfg: &LcflConfig,
) -> Result<Vec<Dataset>> {
    if generators.len() != sizes.len() {
        return Err(LcflError::invalid("one shard size per generator required"));
    }
    let out = par::map_range(generators.len(), |k| {
        let n = cfg.artificial_per_client.unwrap_or(2 * sizes[k]);
        generators[k].sample(n, rng::derive(cfg.seed, &[0xA7, k as u64]))
    });
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub local_before: Vec<f64>,
    pub local_after: Vec<f64>,
    pub reverted: Vec<bool>,
}

/// Labels every point by a vote over `models`: each model's predicted class
/// gains the model's weight. Ties go to the lowest class. `weights[k]`
/// belongs to the `k`-th member in id order.
pub fn relabel_with_ensemble(
    data: &Dataset,
    models: &ModelSet,
    weights: &[usize],
) -> Result<Dataset> {
    if weights.len() != models.len() {
        return Err(LcflError::invalid("one weight per model required"));
    }
    let labels = par::map(data.examples(), |ex| -> Result<usize> {
        let mut tally = vec![0usize; models.n_classes()];
        for ((_, m), &w) in models.members().iter().zip(weights) {
            tally[predict(m.as_ref(), &ex.x)?] += w;
        }
        let mut best = 0;
        for (k, &t) in tally.iter().enumerate() {
            if t > tally[best] {
                best = k;
            }
        }
        Ok(best)
    });
    let mut out = Vec::with_capacity(data.len());
    for (ex, y) in data.iter().zip(labels) {
        out.push(LabeledExample::new(ex.x.clone(), y?));
    }
    Dataset::new(out, data.dim(), data.n_classes())
}

/// Every client downloads its server-side model and fine-tunes it on its
/// shard mixed with a replay sample of the artificial data it received.
/// A fine-tune that lowers local accuracy is discarded.
pub fn finetune_and_download(
    models: &ModelSet,
    clients: &mut [Client],
    retained: &[Dataset],
    cfg: &LcflConfig,
    ledger: &mut TransmissionLedger,
) -> Result<FinetuneOutcome> {
    check_clients(clients)?;
    if models.len() != clients.len() || retained.len() != clients.len() {
        return Err(LcflError::invalid(
            "models, clients and retained pools must align",
        ));
    }
    for c in clients.iter() {
        let m = models
            .get(c.id)
            .ok_or_else(|| LcflError::invalid(format!("no server model for client {}", c.id)))?;
        ledger.record(
            Direction::Download,
            Payload::Model,
            c.id,
            m.to_bytes().len(),
        );
    }
    let seed = cfg.seed;
    let results = par::map_mut(clients, |k, c| -> Result<(f64, f64, bool)> {
        let downloaded = models.members()[k].1.clone_box();
        let shard = c.shard.read();
        let before = evaluate(downloaded.as_ref(), shard)?;
        if cfg.finetune_epochs == 0 {
            c.model = downloaded;
            return Ok((before, before, false));
        }
        let mut mix = shard.clone();
        let pool = &retained[k];
        let n_replay = (pool.len() as f64 * cfg.finetune_replay_fraction).floor() as usize;
        if n_replay > 0 {
            let mut r = rng::seeded(rng::derive(seed, &[0xF1, k as u64]));
            let mut idx = index::sample(&mut r, pool.len(), n_replay).into_vec();
            idx.sort_unstable();
            mix.extend_from(&pool.subset(&idx))?;
        }
        let mut tuned = downloaded.clone_box();
        let tcfg = c
            .train
            .with_epochs(cfg.finetune_epochs)
            .with_seed(rng::derive(c.train.seed, &[0xF7]));
        tuned.update(&mix, &tcfg)?;
        let after = evaluate(tuned.as_ref(), shard)?;
        if after < before {
            c.model = downloaded;
            Ok((before, after, true))
        } else {
            c.model = tuned;
            Ok((before, after, false))
        }
    });
    let mut out = FinetuneOutcome {
        local_before: Vec::new(),
        local_after: Vec::new(),
        reverted: Vec::new(),
    };
    for r in results {
        let (b, a, rev) = r?;
        out.local_before.push(b);
        out.local_after.push(a);
        out.reverted.push(rev);
    }
    Ok(out)
}

/// Where the server's artificial datasets come from.
#[derive(Debug, Clone)]
pub enum ArtificialSource {
    Generators,
    /// Pre-built datasets, one per client, in place of generator samples.
    Provided(Vec<Dataset>),
}

#[derive(Debug, Clone)]
pub struct LcflReport {
    pub pretrained_accuracy: Vec<f64>,
    pub post_loop_accuracy: Vec<f64>,
    pub final_accuracy: Vec<f64>,
    pub ledger: TransmissionLedger,
    pub outcome: LoopOutcome,
    pub finetune: FinetuneOutcome,
    pub artificial_sizes: Vec<usize>,
}

impl LcflReport {
    pub fn mean_pretrained(&self) -> f64 {
        mean(&self.pretrained_accuracy)
    }

    pub fn mean_final(&self) -> f64 {
        mean(&self.final_accuracy)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the whole workflow and evaluates every client on `test` at each
/// stage.
pub fn run_lcfl(clients: &mut [Client], test: &Dataset, cfg: &LcflConfig) -> Result<LcflReport> {
    run_lcfl_with(clients, test, cfg, ArtificialSource::Generators)
}

pub fn run_lcfl_with(
    clients: &mut [Client],
    test: &Dataset,
    cfg: &LcflConfig,
    source: ArtificialSource,
) -> Result<LcflReport> {
    cfg.validate()?;
    let mut ledger = TransmissionLedger::new();
    let mut state = pretrain_and_upload(clients, cfg, &mut ledger)?;
    let pretrained_accuracy = accuracies(&state.models, test)?;

    let artificial = match source {
        ArtificialSource::Generators => {
            materialize_artificial(&state.generators, &state.sizes, cfg)?
        }
        ArtificialSource::Provided(d) => {
            if d.len() != clients.len() {
                return Err(LcflError::invalid(
                    "one provided dataset per client required",
                ));
            }
            d
        }
    };
    let artificial = if cfg.relabel_with_ensemble {
        artificial
            .iter()
            .map(|d| relabel_with_ensemble(d, &state.models, &state.sizes))
            .collect::<Result<Vec<_>>>()?
    } else {
        artificial
    };
    let artificial_sizes = artificial.iter().map(Dataset::len).collect();

    let outcome = selection_loop(
        &mut state.models,
        &artificial,
        &state.sizes,
        &state.train,
        cfg,
        Some(test),
    )?;
    let post_loop_accuracy = accuracies(&state.models, test)?;

    let finetune =
        finetune_and_download(&state.models, clients, &outcome.retained, cfg, &mut ledger)?;
    let final_accuracy = clients
        .iter()
        .map(|c| evaluate(c.model.as_ref(), test))
        .collect::<Result<Vec<_>>>()?;

    Ok(LcflReport {
        pretrained_accuracy,
        post_loop_accuracy,
        final_accuracy,
        ledger,
        outcome,
        finetune,
        artificial_sizes,
    })
}

pub(crate) fn accuracies(models: &ModelSet, test: &Dataset) -> Result<Vec<f64>> {
    models
        .members()
        .iter()
        .map(|(_, m)| evaluate(m.as_ref(), test))
        .collect()
}

#[cfg(test)]
mod tests;
