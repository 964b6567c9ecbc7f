use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::LcflConfig;
use crate::data::{Dataset, LabeledExample};
use crate::error::{LcflError, Result};
use crate::margin::{margin_loss, mpmc_margin, ModelSet};
use crate::models::TrainConfig;
use crate::{par, rng};

/// Provenance of one transmitted artificial example.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    /// Zero-based transmission index.
    pub iteration: usize,
    /// Loop pass that produced it.
    pub pass: usize,
    /// Client whose artificial dataset (and generator) produced the example.
    pub origin: usize,
    pub x: Vec<f64>,
    pub y: usize,
    pub y_minus: usize,
    pub i_plus: usize,
    pub i_minus: usize,
    pub rho: f64,
}

impl SelectionRecord {
    /// Distinct recipients, `i_plus` first.
    pub fn recipients(&self) -> Vec<usize> {
        if self.i_plus == self.i_minus {
            vec![self.i_plus]
        } else {
            vec![self.i_plus, self.i_minus]
        }
    }

    /// One JSON object with the exported fields.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line {
            iteration: usize,
            origin: usize,
            y: usize,
            y_minus: usize,
            i_plus: usize,
            i_minus: usize,
            rho: f64,
        }
        serde_json::to_string(&Line {
            iteration: self.iteration,
            origin: self.origin,
            y: self.y,
            y_minus: self.y_minus,
            i_plus: self.i_plus,
            i_minus: self.i_minus,
            rho: self.rho,
        })
        .expect("record serializes")
    }
}

pub fn write_records_jsonl<W: Write>(records: &[SelectionRecord], mut w: W) -> Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| LcflError::io("records.jsonl", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub transmissions: usize,
    /// Global test accuracy per client, in id order.
    pub accuracy: Vec<f64>,
    /// Margin loss over the union of artificial datasets; `None` for
    /// methods without one.
    pub margin_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub records: Vec<SelectionRecord>,
    pub trace: Vec<TracePoint>,
    /// Artificial examples each client received and kept.
    pub retained: Vec<Dataset>,
    pub passes: usize,
    pub transmissions: usize,
    pub updates: Vec<usize>,
    pub margin_loss_start: f64,
    pub margin_loss_end: f64,
}

/// Picks a client with probability proportional to its shard size.
#[derive(Debug, Clone)]
pub struct ClientSampler {
    dist: WeightedIndex<usize>,
}

impl ClientSampler {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        let dist = WeightedIndex::new(sizes.iter().copied())
            .map_err(|e| LcflError::invalid(format!("client sizes: {e}")))?;
        Ok(Self { dist })
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> usize {
        self.dist.sample(rng)
    }
}

fn union(pools: &[Dataset]) -> Result<Dataset> {
    let mut all = Dataset::empty(pools[0].dim(), pools[0].n_classes());
    for p in pools {
        all.extend_from(p)?;
    }
    Ok(all)
}

/// Server-side selection and retraining.
///
/// Each pass samples a client by shard size and one of its artificial
/// examples, then scores it with the multi-party margin. A non-positive
/// margin, unless both roles fall on the sampled client itself, sends the
/// example to `i_plus` and `i_minus`. A recipient with `update_threshold`
/// pending examples retrains on them together with everything it received
/// earlier, plus its own artificial set when `mix_own_artificial` is on.
/// The loop stops after `iterations` transmissions or `safety_cap` passes;
/// leftover buffers are flushed with one last update.
pub fn selection_loop(
    models: &mut ModelSet,
    artificial: &[Dataset],
    sizes: &[usize],
    train: &[TrainConfig],
    cfg: &LcflConfig,
    test: Option<&Dataset>,
) -> Result<LoopOutcome> {
    cfg.validate()?;
    let n = models.len();
    if artificial.len() != n || sizes.len() != n || train.len() != n {
        return Err(LcflError::invalid(
            "models, artificial datasets, sizes and training configs must align",
        ));
    }
    if models.ids() != (0..n).collect::<Vec<_>>() {
        return Err(LcflError::invalid("model ids must be 0..n"));
    }
    if artificial.iter().any(Dataset::is_empty) {
        return Err(LcflError::EmptyDataset("artificial dataset"));
    }
    let pool = union(artificial)?;
    let sampler = ClientSampler::new(sizes)?;
    let mut rng = rng::seeded(rng::derive(cfg.seed, &[0x5E1]));

    let mut pending: Vec<Vec<LabeledExample>> = vec![Vec::new(); n];
    let mut retained: Vec<Dataset> = (0..n)
        .map(|_| Dataset::empty(pool.dim(), pool.n_classes()))
        .collect();
    let mut updates = vec![0usize; n];
    let mut records = Vec::new();
    let mut trace = Vec::new();

    let snapshot = |models: &ModelSet, step: usize, t: usize| -> Result<TracePoint> {
        let accuracy = match test {
            Some(test) => super::accuracies(models, test)?,
            None => Vec::new(),
        };
        Ok(TracePoint {
            step,
            transmissions: t,
            accuracy,
            margin_loss: Some(margin_loss(models, &pool)?),
        })
    };

    let margin_loss_start = margin_loss(models, &pool)?;
    if cfg.trace_every > 0 {
        trace.push(snapshot(models, 0, 0)?);
    }

    let cap = cfg.safety_cap();
    let mut t = 0usize;
    let mut passes = 0usize;
    while t < cfg.iterations && passes < cap {
        passes += 1;
        let i = sampler.sample(&mut rng);
        let ex = &artificial[i].examples()[rng.random_range(0..artificial[i].len())];
        let v = mpmc_margin(models, &ex.x, ex.y)?;
        if !(v.is_violation() && (v.i_plus != i || v.i_minus != i)) {
            continue;
        }
        let record = SelectionRecord {
            iteration: t,
            pass: passes,
            origin: i,
            x: ex.x.clone(),
            y: ex.y,
            y_minus: v.y_minus,
            i_plus: v.i_plus,
            i_minus: v.i_minus,
            rho: v.rho,
        };
        let due: Vec<usize> = record
            .recipients()
            .into_iter()
            .filter(|&r| {
                pending[r].push(ex.clone());
                pending[r].len() >= cfg.update_threshold
            })
            .collect();
        records.push(record);
        t += 1;
        if !due.is_empty() {
            retrain(
                models,
                &due,
                &mut pending,
                &mut retained,
                &mut updates,
                artificial,
                train,
                cfg,
            )?;
        }
        if cfg.trace_every > 0 && t.is_multiple_of(cfg.trace_every) {
            trace.push(snapshot(models, passes, t)?);
        }
    }

    let leftover: Vec<usize> = (0..n).filter(|&r| !pending[r].is_empty()).collect();
    if !leftover.is_empty() {
        retrain(
            models,
            &leftover,
            &mut pending,
            &mut retained,
            &mut updates,
            artificial,
            train,
            cfg,
        )?;
    }
    let stale = trace.last().map(|p| p.transmissions) != Some(t) || !leftover.is_empty();
    if cfg.trace_every > 0 && stale {
        trace.push(snapshot(models, passes, t)?);
    }
    let margin_loss_end = margin_loss(models, &pool)?;

    Ok(LoopOutcome {
        records,
        trace,
        retained,
        passes,
        transmissions: t,
        updates,
        margin_loss_start,
        margin_loss_end,
    })
}

/// Retrains each client in `due` on its pending buffer plus retained data.
/// Distinct clients touch distinct models, so they train concurrently.
#[allow(clippy::too_many_arguments)]
fn retrain(
    models: &mut ModelSet,
    due: &[usize],
    pending: &mut [Vec<LabeledExample>],
    retained: &mut [Dataset],
    updates: &mut [usize],
    artificial: &[Dataset],
    train: &[TrainConfig],
    cfg: &LcflConfig,
) -> Result<()> {
    let mut batches: Vec<Option<Dataset>> = vec![None; models.len()];
    for &r in due {
        let fresh = Dataset::new(
            std::mem::take(&mut pending[r]),
            retained[r].dim(),
            retained[r].n_classes(),
        )?;
        let mut batch = fresh.clone();
        batch.extend_from(&retained[r])?;
        if cfg.mix_own_artificial {
            batch.extend_from(&artificial[r])?;
        }
        retained[r].extend_from(&fresh)?;
        batches[r] = Some(batch);
    }
    let seeds: Vec<u64> = (0..models.len())
        .map(|r| rng::derive(cfg.seed, &[0x0FD, r as u64, updates[r] as u64]))
        .collect();
    let results = par::map_mut(models.members_mut(), |k, (_, model)| -> Result<()> {
        match &batches[k] {
            Some(batch) => {
                let tcfg = train[k].with_epochs(cfg.update_epochs).with_seed(seeds[k]);
                model.update(batch, &tcfg)
            }
            None => Ok(()),
        }
    });
    for r in results {
        r?;
    }
    for &r in due {
        updates[r] += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contribution {
    pub as_origin: usize,
    pub as_recipient: usize,
}

/// Tallies how often each client's generator produced a transmitted example
/// and how often each client received one. A client that fills both roles
/// for one example is counted once.
pub fn contribution_counts(records: &[SelectionRecord], n_clients: usize) -> Vec<Contribution> {
    let mut out = vec![Contribution::default(); n_clients];
    for r in records {
        out[r.origin].as_origin += 1;
        for c in r.recipients() {
            out[c].as_recipient += 1;
        }
    }
    out
}
