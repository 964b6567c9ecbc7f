use std::sync::atomic::Ordering;

use super::*;
use crate::data::{make_blobs, partition, train_test_split, PartitionSpec};
use crate::models::{ModelKind, ModelSpec};

fn gmm() -> GeneratorSpec {
    GeneratorSpec::Gmm {
        components_per_class: 1,
        dp: None,
    }
}

fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        seed,
        ..TrainConfig::default()
    }
}

/// `n` logistic-regression clients on 4-class blobs, plus the test split.
fn setup(n: usize, seed: u64) -> (Vec<Client>, Dataset) {
    let ds = make_blobs(40, 4, 2, 0.5, seed).unwrap();
    let (train, test) = train_test_split(&ds, 0.25, seed).unwrap();
    let spec = if n == 1 {
        PartitionSpec::equal(1, 4, 4)
    } else {
        PartitionSpec::equal(n, 2, 2)
    };
    let shards = partition(&train, &spec, seed).unwrap();
    let clients = shards
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let model = ModelSpec::logreg().build(2, 4, 0).unwrap();
            Client::new(i, s, model, gmm(), quick_train(seed + i as u64))
        })
        .collect();
    (clients, test)
}

fn small_cfg(seed: u64) -> LcflConfig {
    LcflConfig {
        iterations: 60,
        update_threshold: 8,
        seed,
        ..LcflConfig::default()
    }
}

#[test]
fn upload_phase_records_two_transfers_per_client() {
    let (mut clients, _) = setup(7, 1);
    let mut ledger = TransmissionLedger::new();
    pretrain_and_upload(&mut clients, &small_cfg(1), &mut ledger).unwrap();
    assert_eq!(ledger.model_transfers(), 14);
    assert!(ledger
        .events()
        .iter()
        .all(|e| e.direction == Direction::Upload));

    let (mut one, _) = setup(1, 1);
    let mut ledger = TransmissionLedger::new();
    pretrain_and_upload(&mut one, &small_cfg(1), &mut ledger).unwrap();
    assert_eq!(ledger.model_transfers(), 2);
}

#[test]
fn full_workflow_costs_three_transfers_per_client() {
    for n in [1, 2, 3, 5] {
        let (mut clients, test) = setup(n, 3);
        let report = run_lcfl(&mut clients, &test, &small_cfg(3)).unwrap();
        assert_eq!(report.ledger.model_transfers(), 3 * n, "n = {n}");
        let downloads = report
            .ledger
            .events()
            .iter()
            .filter(|e| e.direction == Direction::Download)
            .count();
        assert_eq!(downloads, n);
    }
}

#[test]
fn ledger_bytes_match_serialized_sizes() {
    let (mut clients, _) = setup(3, 2);
    let mut ledger = TransmissionLedger::new();
    let state = pretrain_and_upload(&mut clients, &small_cfg(2), &mut ledger).unwrap();
    for (k, pair) in ledger.events().chunks(2).enumerate() {
        assert_eq!(pair[0].bytes, clients[k].model.to_bytes().len());
        assert_eq!(pair[1].bytes, state.generators[k].to_bytes().len());
    }
}

#[test]
fn artificial_sets_default_to_twice_shard_size() {
    let (mut clients, _) = setup(4, 5);
    let cfg = small_cfg(5);
    let state = pretrain_and_upload(&mut clients, &cfg, &mut TransmissionLedger::new()).unwrap();
    let a = materialize_artificial(&state.generators, &state.sizes, &cfg).unwrap();
    let b = materialize_artificial(&state.generators, &state.sizes, &cfg).unwrap();
    assert_eq!(a, b);
    for (k, d) in a.iter().enumerate() {
        assert_eq!(d.len(), 2 * state.sizes[k]);
        let own = clients[k].shard().read().label_set();
        assert!(d.label_set().iter().all(|y| own.contains(y)));
    }
    let fixed = LcflConfig {
        artificial_per_client: Some(33),
        ..cfg
    };
    let c = materialize_artificial(&state.generators, &state.sizes, &fixed).unwrap();
    assert!(c.iter().all(|d| d.len() == 33));
}

#[test]
fn sampler_follows_shard_sizes() {
    let sampler = ClientSampler::new(&[10, 30]).unwrap();
    let mut rng = rng::seeded(11);
    let n = 10_000;
    let hits = (0..n).filter(|_| sampler.sample(&mut rng) == 1).count();
    let freq = hits as f64 / n as f64;
    assert!((freq - 0.75).abs() <= 0.02, "freq {freq}");
    assert!(ClientSampler::new(&[0, 0]).is_err());
}

#[test]
fn single_client_never_transmits() {
    let (mut clients, test) = setup(1, 4);
    let cfg = LcflConfig {
        iterations: 20,
        ..small_cfg(4)
    };
    let report = run_lcfl(&mut clients, &test, &cfg).unwrap();
    assert_eq!(report.outcome.transmissions, 0);
    assert_eq!(report.outcome.passes, cfg.safety_cap());
    assert!(report.outcome.records.is_empty());
    assert_eq!(report.ledger.model_transfers(), 3);
}

#[test]
fn every_record_passes_the_gate() {
    let (mut clients, test) = setup(4, 6);
    let report = run_lcfl(&mut clients, &test, &small_cfg(6)).unwrap();
    let out = &report.outcome;
    assert!(out.transmissions > 0);
    assert_eq!(out.records.len(), out.transmissions);
    for (t, r) in out.records.iter().enumerate() {
        assert_eq!(r.iteration, t);
        assert!(r.rho <= 0.0);
        assert!(r.i_plus != r.origin || r.i_minus != r.origin);
        assert_ne!(r.y, r.y_minus);
    }
    let steps: Vec<usize> = out.trace.iter().map(|p| p.transmissions).collect();
    assert_eq!(steps[0], 0);
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    assert!(steps.iter().all(|&s| s % 10 == 0 || s == out.transmissions));
}

#[test]
fn buffers_flush_into_retained_pools() {
    let (mut clients, test) = setup(4, 7);
    let cfg = small_cfg(7);
    let report = run_lcfl(&mut clients, &test, &cfg).unwrap();
    let out = &report.outcome;
    let counts = contribution_counts(&out.records, 4);
    for (k, c) in counts.iter().enumerate() {
        let got = c.as_recipient;
        assert_eq!(out.retained[k].len(), got);
        let expected = got.div_ceil(cfg.update_threshold);
        assert_eq!(out.updates[k], expected, "client {k}");
    }
}

#[test]
fn contribution_tallies_add_up() {
    assert!(contribution_counts(&[], 3)
        .iter()
        .all(|c| *c == Contribution::default()));
    let (mut clients, test) = setup(5, 8);
    let report = run_lcfl(&mut clients, &test, &small_cfg(8)).unwrap();
    let records = &report.outcome.records;
    let counts = contribution_counts(records, 5);
    let origins: usize = counts.iter().map(|c| c.as_origin).sum();
    assert_eq!(origins, records.len());
    let recipients: usize = counts.iter().map(|c| c.as_recipient).sum();
    let shared = records.iter().filter(|r| r.i_plus == r.i_minus).count();
    assert_eq!(recipients, 2 * records.len() - shared);
}

#[test]
fn zero_finetune_epochs_keeps_server_models() {
    let (mut clients, test) = setup(3, 9);
    let cfg = LcflConfig {
        finetune_epochs: 0,
        ..small_cfg(9)
    };
    let mut ledger = TransmissionLedger::new();
    let mut state = pretrain_and_upload(&mut clients, &cfg, &mut ledger).unwrap();
    let artificial = materialize_artificial(&state.generators, &state.sizes, &cfg).unwrap();
    let out = selection_loop(
        &mut state.models,
        &artificial,
        &state.sizes,
        &state.train,
        &cfg,
        Some(&test),
    )
    .unwrap();
    let before = ledger.model_transfers();
    let ft = finetune_and_download(
        &state.models,
        &mut clients,
        &out.retained,
        &cfg,
        &mut ledger,
    )
    .unwrap();
    assert_eq!(ledger.model_transfers(), before + 3);
    assert!(ft.reverted.iter().all(|r| !r));
    for (c, (_, m)) in clients.iter().zip(state.models.members()) {
        assert_eq!(c.model.to_bytes(), m.to_bytes());
    }
}

#[test]
fn finetune_never_lowers_local_accuracy() {
    let (mut clients, test) = setup(4, 10);
    let report = run_lcfl(&mut clients, &test, &small_cfg(10)).unwrap();
    for (k, c) in clients.iter().enumerate() {
        let now = c.local_accuracy().unwrap();
        assert!(now >= report.finetune.local_before[k]);
    }
}

#[test]
fn server_phase_never_reads_private_shards() {
    let (mut clients, test) = setup(3, 12);
    let probes: Vec<_> = clients.iter().map(|c| c.shard().read_probe()).collect();
    let reads = || {
        probes
            .iter()
            .map(|p| p.load(Ordering::SeqCst))
            .collect::<Vec<_>>()
    };
    let cfg = small_cfg(12);
    let mut ledger = TransmissionLedger::new();

    assert!(reads().iter().all(|&r| r == 0));
    let mut state = pretrain_and_upload(&mut clients, &cfg, &mut ledger).unwrap();
    let after_upload = reads();
    assert!(after_upload.iter().all(|&r| r > 0));

    let artificial = materialize_artificial(&state.generators, &state.sizes, &cfg).unwrap();
    let out = selection_loop(
        &mut state.models,
        &artificial,
        &state.sizes,
        &state.train,
        &cfg,
        Some(&test),
    )
    .unwrap();
    assert_eq!(reads(), after_upload);

    finetune_and_download(
        &state.models,
        &mut clients,
        &out.retained,
        &cfg,
        &mut ledger,
    )
    .unwrap();
    assert!(reads()
        .iter()
        .zip(&after_upload)
        .all(|(now, then)| now > then));
}

/// Fixed output everywhere; trains to nothing.
#[derive(Debug, Clone)]
struct Constant {
    dim: usize,
    probs: Vec<f64>,
}

impl ConfidenceModel for Constant {
    fn kind(&self) -> ModelKind {
        ModelKind::Custom
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn n_classes(&self) -> usize {
        self.probs.len()
    }

    fn confidence(&self, x: &[f64]) -> Result<Vec<f64>> {
        crate::models::check_input(x, self.dim)?;
        Ok(self.probs.clone())
    }

    fn fit(&mut self, _: &Dataset, _: &TrainConfig) -> Result<()> {
        Ok(())
    }

    fn update(&mut self, _: &Dataset, _: &TrainConfig) -> Result<()> {
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.probs.iter().flat_map(|p| p.to_le_bytes()).collect()
    }

    fn clone_box(&self) -> Box<dyn ConfidenceModel> {
        Box::new(self.clone())
    }
}

#[test]
fn foreign_model_types_join_without_server_changes() {
    let (mut clients, test) = setup(3, 13);
    clients[1].model = Box::new(Constant {
        dim: 2,
        probs: vec![0.7, 0.1, 0.1, 0.1],
    });
    let report = run_lcfl(&mut clients, &test, &small_cfg(13)).unwrap();
    assert_eq!(report.ledger.model_transfers(), 9);
    assert_eq!(clients[1].model.kind(), ModelKind::Custom);
    assert!(report
        .outcome
        .records
        .iter()
        .any(|r| r.i_minus == 1 || r.i_plus == 1));
}

#[test]
fn equal_seeds_reproduce_records_and_trace() {
    let run = || {
        let (mut clients, test) = setup(4, 14);
        run_lcfl(&mut clients, &test, &small_cfg(14)).unwrap()
    };
    let (a, b) = (run(), run());
    let lines = |r: &LcflReport| {
        let mut buf = Vec::new();
        write_records_jsonl(&r.outcome.records, &mut buf).unwrap();
        buf
    };
    assert_eq!(lines(&a), lines(&b));
    assert_eq!(a.outcome.trace, b.outcome.trace);
    assert_eq!(a.final_accuracy, b.final_accuracy);
}

#[test]
fn record_lines_carry_exported_fields() {
    let r = SelectionRecord {
        iteration: 3,
        pass: 9,
        origin: 1,
        x: vec![0.5],
        y: 2,
        y_minus: 0,
        i_plus: 1,
        i_minus: 4,
        rho: -0.25,
    };
    let v: serde_json::Value = serde_json::from_str(&r.to_json_line()).unwrap();
    assert_eq!(v["iteration"], 3);
    assert_eq!(v["origin"], 1);
    assert_eq!(v["y_minus"], 0);
    assert_eq!(v["i_minus"], 4);
    assert_eq!(v["rho"], -0.25);
    assert_eq!(r.recipients(), vec![1, 4]);
}

#[test]
fn config_validation() {
    let ok = LcflConfig::default();
    assert!(ok.validate().is_ok());
    assert_eq!(ok.safety_cap(), 50 * ok.iterations);
    for bad in [
        LcflConfig {
            update_threshold: 0,
            ..ok.clone()
        },
        LcflConfig {
            update_epochs: 0,
            ..ok.clone()
        },
        LcflConfig {
            safety_cap: Some(ok.iterations - 1),
            ..ok.clone()
        },
        LcflConfig {
            finetune_replay_fraction: 1.5,
            ..ok.clone()
        },
        LcflConfig {
            artificial_per_client: Some(0),
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn misnumbered_clients_are_rejected() {
    let (mut clients, _) = setup(2, 15);
    clients[1].id = 5;
    let err = pretrain_and_upload(&mut clients, &small_cfg(15), &mut TransmissionLedger::new());
    assert!(err.is_err());
}

#[test]
fn ensemble_relabel_is_a_size_weighted_vote() {
    let constant = |top: usize| -> Box<dyn ConfidenceModel> {
        let mut probs = vec![0.1; 4];
        probs[top] = 0.7;
        Box::new(Constant { dim: 2, probs })
    };
    let models = ModelSet::new(vec![(0, constant(0)), (1, constant(1)), (2, constant(1))]).unwrap();
    let data = Dataset::new(
        vec![
            LabeledExample::new(vec![0.5, -1.0], 3),
            LabeledExample::new(vec![2.0, 2.0], 2),
        ],
        2,
        4,
    )
    .unwrap();
    for (weights, want) in [([5, 2, 2], 0), ([3, 2, 2], 1), ([4, 2, 2], 0)] {
        let out = relabel_with_ensemble(&data, &models, &weights).unwrap();
        assert!(out.iter().all(|e| e.y == want), "{weights:?}");
        assert_eq!(out.examples()[0].x, data.examples()[0].x);
    }
    assert!(relabel_with_ensemble(&data, &models, &[1, 1]).is_err());

    let (mut clients, test) = setup(3, 21);
    let cfg = LcflConfig {
        relabel_with_ensemble: true,
        ..small_cfg(21)
    };
    let report = run_lcfl(&mut clients, &test, &cfg).unwrap();
    assert_eq!(report.ledger.model_transfers(), 9);
}
