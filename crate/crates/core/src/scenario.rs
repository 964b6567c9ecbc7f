//! Declarative experiments.
//!
//! A scenario is one TOML file naming a dataset, a partition regime, one
//! model and generator per client, and the algorithm to run. Parsing and
//! validation finish before anything touches the filesystem, so a rejected
//! config leaves no artifacts behind. Diagnostics carry `origin:line:column`.
//!
//! A run directory holds `metrics.csv`, `ledger.csv`, `records.jsonl` and
//! `summary.txt`. Trace files describe the first repeat; the summary lists
//! the mean accuracy of every repeat.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;
use toml::Spanned;

use crate::baselines::{run_federated, FedConfig, FedMethod, ParametricNet};
use crate::data::{
    make_blobs, partition, train_test_split, Balance, Dataset, PartitionSpec, DEFAULT_UNEQUAL_SKEW,
};
use crate::error::{LcflError, Result};
use crate::generators::{DpParams, GeneratorKind};
use crate::models::{
    Activation, ConfidenceModel, ModelKind, ModelSpec, TrainConfig, DEFAULT_HIDDEN, DEFAULT_ROUNDS,
};
use crate::rng;
use crate::server::{
    run_lcfl, write_records_jsonl, Client, GeneratorSpec, LcflConfig, LcflReport, SelectionRecord,
    TracePoint, TransmissionLedger,
};

/// Environment variable naming the directory under which runs without an
/// explicit output directory are written.
pub const OUT_ROOT_ENV: &str = "LCFL_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Lcfl,
    FedAvg,
    FedProx,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Lcfl => "lcfl",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n_per_class: usize,
        n_classes: usize,
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Header row, feature columns, then an integer `label` column.
    Csv { path: PathBuf, n_classes: usize },
}

impl DatasetSpec {
    pub fn n_classes(&self) -> usize {
        match self {
            DatasetSpec::Blobs { n_classes, .. } | DatasetSpec::Csv { n_classes, .. } => *n_classes,
        }
    }

    /// Blob draws depend on `seed`; CSV data ignores it.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs {
                n_per_class,
                n_classes,
                dim,
                spread,
            } => make_blobs(*n_per_class, *n_classes, *dim, *spread, seed),
            DatasetSpec::Csv { path, n_classes } => Dataset::from_csv_path(path, *n_classes),
        }
    }
}

fn default_spread() -> f64 {
    1.0
}

fn default_repeats() -> usize {
    1
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionSection {
    n_clients: usize,
    classes_per_client: (usize, usize),
    #[serde(default = "default_balance")]
    balance: Balance,
    unequal_skew: Option<f64>,
}

fn default_balance() -> Balance {
    Balance::Equal
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientsSection {
    models: Spanned<Vec<ModelKind>>,
    generators: Spanned<Vec<GeneratorKind>>,
}

/// Local training hyperparameters shared by every client; per-client seeds
/// are derived from the scenario seed.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            l2: t.l2,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            l2: self.l2,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MlpSection {
    hidden: usize,
    activation: Activation,
}

impl Default for MlpSection {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            activation: Activation::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StumpsSection {
    rounds: usize,
}

impl Default for StumpsSection {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GmmSection {
    components_per_class: usize,
}

impl Default for GmmSection {
    fn default() -> Self {
        Self {
            components_per_class: 2,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct KdeSection {
    bandwidth: f64,
}

impl Default for KdeSection {
    fn default() -> Self {
        Self { bandwidth: 0.5 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    name: String,
    #[serde(default)]
    description: String,
    algorithm: Spanned<Algorithm>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_repeats")]
    repeats: usize,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
    output: Option<PathBuf>,
    dataset: Spanned<DatasetSpec>,
    partition: Spanned<PartitionSection>,
    clients: Spanned<ClientsSection>,
    #[serde(default)]
    train: Option<Spanned<TrainSection>>,
    #[serde(default)]
    mlp: Option<Spanned<MlpSection>>,
    #[serde(default)]
    stumps: Option<Spanned<StumpsSection>>,
    #[serde(default)]
    gmm: Option<Spanned<GmmSection>>,
    #[serde(default)]
    kde: Option<Spanned<KdeSection>>,
    #[serde(default)]
    dp: Option<Spanned<DpParams>>,
    #[serde(default)]
    lcfl: Option<Spanned<LcflConfig>>,
    #[serde(default)]
    fed: Option<Spanned<FedConfig>>,
}

/// A parsed and validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub description: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub repeats: usize,
    pub test_fraction: f64,
    pub output: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub models: Vec<ModelSpec>,
    pub generators: Vec<GeneratorSpec>,
    pub train: TrainSection,
    pub lcfl: LcflConfig,
    pub fed: FedConfig,
}

/// 1-based line and column of byte `offset` in `src`.
fn position(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before
        .rfind('\n')
        .map_or(before.len(), |nl| before.len() - nl - 1)
        + 1;
    (line, col)
}

struct Diag<'a> {
    src: &'a str,
    origin: &'a str,
}

impl Diag<'_> {
    fn at(&self, span: Range<usize>, msg: impl std::fmt::Display) -> LcflError {
        let (line, col) = position(self.src, span.start);
        LcflError::Config(format!("{}:{line}:{col}: {msg}", self.origin))
    }

    fn check<T>(&self, span: Range<usize>, r: Result<T>) -> Result<T> {
        r.map_err(|e| self.at(span, e))
    }
}

fn section<T: Default>(s: Option<Spanned<T>>) -> (T, Range<usize>) {
    match s {
        Some(s) => {
            let span = s.span();
            (s.into_inner(), span)
        }
        None => (T::default(), 0..0),
    }
}

impl ScenarioConfig {
    /// Parses TOML text. `origin` names the source in diagnostics.
    pub fn parse(src: &str, origin: &str) -> Result<Self> {
        let diag = Diag { src, origin };
        let raw: Raw = toml::from_str(src).map_err(|e| {
            let msg = e.message().to_string();
            match e.span() {
                Some(span) => diag.at(span, msg),
                None => LcflError::Config(format!("{origin}: {msg}")),
            }
        })?;

        if raw.name.trim().is_empty() {
            return Err(diag.at(0..0, "name must not be empty"));
        }
        if raw.repeats == 0 {
            return Err(diag.at(0..0, "repeats must be positive"));
        }
        if !(raw.test_fraction > 0.0 && raw.test_fraction < 1.0) {
            return Err(diag.at(0..0, "test_fraction must lie in (0, 1)"));
        }

        let dataset_span = raw.dataset.span();
        let dataset = raw.dataset.into_inner();
        if let DatasetSpec::Blobs {
            n_per_class,
            n_classes,
            dim,
            spread,
        } = &dataset
        {
            if *n_per_class == 0
                || *n_classes < 2
                || *dim == 0
                || !(spread.is_finite() && *spread > 0.0)
            {
                return Err(diag.at(
                    dataset_span,
                    "blobs need n_per_class >= 1, n_classes >= 2, dim >= 1 and spread > 0",
                ));
            }
        }
        let n_classes = dataset.n_classes();

        let part_span = raw.partition.span();
        let p = raw.partition.into_inner();
        let skew = match (p.balance, p.unequal_skew) {
            (_, Some(s)) => s,
            (Balance::Equal, None) => 1.0,
            (Balance::Unequal, None) => DEFAULT_UNEQUAL_SKEW,
        };
        let partition = PartitionSpec {
            n_clients: p.n_clients,
            classes_per_client: p.classes_per_client,
            balance: p.balance,
            unequal_skew: skew,
        };
        diag.check(part_span.clone(), partition.validate(n_classes))?;

        let clients = raw.clients.into_inner();
        let n = partition.n_clients;
        for (what, len, span) in [
            (
                "models",
                clients.models.get_ref().len(),
                clients.models.span(),
            ),
            (
                "generators",
                clients.generators.get_ref().len(),
                clients.generators.span(),
            ),
        ] {
            if len != n {
                return Err(diag.at(
                    span,
                    format!("{what} lists {len} entries but partition.n_clients = {n}"),
                ));
            }
        }

        let (train, train_span) = section(raw.train);
        diag.check(train_span, train.with_seed(0).validate())?;
        let (mlp, mlp_span) = section(raw.mlp);
        if mlp.hidden == 0 {
            return Err(diag.at(mlp_span, "mlp.hidden must be positive"));
        }
        let (stumps, stumps_span) = section(raw.stumps);
        if stumps.rounds == 0 {
            return Err(diag.at(stumps_span, "stumps.rounds must be positive"));
        }
        let (gmm, gmm_span) = section(raw.gmm);
        if gmm.components_per_class == 0 {
            return Err(diag.at(gmm_span, "gmm.components_per_class must be positive"));
        }
        let (kde, kde_span) = section(raw.kde);
        if !(kde.bandwidth > 0.0 && kde.bandwidth.is_finite()) {
            return Err(diag.at(kde_span, "kde.bandwidth must be positive"));
        }
        let dp = match raw.dp {
            Some(dp) => {
                let span = dp.span();
                let dp = dp.into_inner();
                diag.check(span, dp.validate())?;
                Some(dp)
            }
            None => None,
        };

        let models_span = clients.models.span();
        let mut models = Vec::with_capacity(n);
        for kind in clients.models.into_inner() {
            models.push(match kind {
                ModelKind::Logreg => ModelSpec::logreg(),
                ModelKind::Mlp => ModelSpec::mlp(mlp.hidden, mlp.activation),
                ModelKind::Stumps => ModelSpec::stumps(stumps.rounds),
                ModelKind::Custom => {
                    return Err(diag.at(models_span, "custom models cannot be declared in a config"))
                }
            });
        }
        let gen_span = clients.generators.span();
        let generators: Vec<GeneratorSpec> = clients
            .generators
            .into_inner()
            .into_iter()
            .map(|k| match k {
                GeneratorKind::Gmm => GeneratorSpec::Gmm {
                    components_per_class: gmm.components_per_class,
                    dp,
                },
                GeneratorKind::Kde => GeneratorSpec::Kde {
                    bandwidth: kde.bandwidth,
                },
            })
            .collect();
        if dp.is_some()
            && generators
                .iter()
                .all(|g| matches!(g, GeneratorSpec::Kde { .. }))
        {
            return Err(diag.at(
                gen_span,
                "dp applies to gmm generators but none are declared",
            ));
        }

        let algo_span = raw.algorithm.span();
        let algorithm = raw.algorithm.into_inner();
        let (lcfl, lcfl_span) = section(raw.lcfl);
        diag.check(lcfl_span, lcfl.validate())?;
        let (fed, fed_span) = section(raw.fed);
        diag.check(fed_span, fed.validate())?;
        if algorithm != Algorithm::Lcfl {
            let first = models[0];
            if !matches!(first.kind, ModelKind::Logreg | ModelKind::Mlp) {
                return Err(diag.at(
                    algo_span,
                    format!(
                        "{} needs logreg or mlp models, found {}",
                        algorithm.name(),
                        first.kind
                    ),
                ));
            }
            if models.iter().any(|m| *m != first) {
                return Err(diag.at(
                    algo_span,
                    format!("{} needs every client on the same model", algorithm.name()),
                ));
            }
        }

        Ok(Self {
            name: raw.name,
            description: raw.description,
            algorithm,
            seed: raw.seed,
            repeats: raw.repeats,
            test_fraction: raw.test_fraction,
            output: raw.output,
            dataset,
            partition,
            models,
            generators,
            train,
            lcfl,
            fed,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path).map_err(|e| LcflError::io(path, e))?;
        Self::parse(&src, &path.display().to_string())
    }

    /// A built-in scenario by name.
    pub fn preset(name: &str) -> Result<Self> {
        let p = PRESETS
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| LcflError::Config(format!("unknown preset '{name}'")))?;
        Self::parse(p.source, &format!("preset:{}", p.name))
    }

    pub fn n_clients(&self) -> usize {
        self.partition.n_clients
    }

    /// Output directory: explicit `output`, else `<root>/<name>` with the
    /// root taken from [`OUT_ROOT_ENV`].
    pub fn default_output(&self) -> PathBuf {
        if let Some(dir) = &self.output {
            return dir.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        root.join(&self.name)
    }
}

pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub source: &'static str,
}

macro_rules! preset {
    ($name:literal, $summary:literal) => {
        Preset {
            name: $name,
            summary: $summary,
            source: include_str!(concat!("../presets/", $name, ".toml")),
        }
    };
}

pub const PRESETS: &[Preset] = &[
    preset!(
        "hom-A",
        "7 mlp clients, all 10 classes, equal data per class"
    ),
    preset!("hom-A-fedavg", "hom-A under FedAvg, ratio 0.3, 450 rounds"),
    preset!(
        "hom-A-fedprox",
        "hom-A under FedProx, ratio 0.3, 450 rounds"
    ),
    preset!(
        "hom-B",
        "7 mlp clients, all 10 classes, unequal data per class"
    ),
    preset!("hom-C", "7 mlp clients, 8-9 classes each, unequal"),
    preset!("hom-D", "7 mlp clients, 2-4 classes each, unequal"),
    preset!("hom-D-fedavg", "hom-D under FedAvg, ratio 0.3, 450 rounds"),
    preset!(
        "hom-D-fedprox",
        "hom-D under FedProx, ratio 0.3, 450 rounds"
    ),
    preset!(
        "het-A",
        "8 clients mixing logreg, mlp and stumps, all 10 classes, equal"
    ),
    preset!(
        "het-B",
        "8 clients mixing logreg, mlp and stumps, 3-4 classes each, unequal"
    ),
    preset!("noniid", "6 mlp clients, 2 of 5 classes each, 2-D blobs"),
    preset!(
        "het-noniid",
        "6 clients mixing logreg, mlp and stumps, 2 of 5 classes each, 2-D blobs"
    ),
];

/// Outcome of one scenario, as written to `summary.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub method: String,
    pub seed: u64,
    pub n_clients: usize,
    /// Final global test accuracy per client, first repeat.
    pub final_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Mean final accuracy of each repeat.
    pub repeat_accuracy: Vec<f64>,
    /// Mean pre-trained accuracy, first repeat; LC-FL only.
    pub pretrained_mean: Option<f64>,
    /// Model and generator transfers, first repeat.
    pub transmissions: usize,
    /// Artificial examples transmitted by the server loop; LC-FL only.
    pub transmitted_examples: Option<usize>,
    pub wall_time_s: f64,
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|a| format!("{a:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("method", self.method.clone());
        kv("seed", self.seed.to_string());
        kv("n_clients", self.n_clients.to_string());
        kv("final_accuracy", join(&self.final_accuracy));
        kv("mean_accuracy", format!("{:.6}", self.mean_accuracy));
        kv("repeat_accuracy", join(&self.repeat_accuracy));
        if let Some(p) = self.pretrained_mean {
            kv("pretrained_mean", format!("{p:.6}"));
        }
        kv("transmissions", self.transmissions.to_string());
        if let Some(t) = self.transmitted_examples {
            kv("transmitted_examples", t.to_string());
        }
        kv("wall_time_s", format!("{:.3}", self.wall_time_s));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| {
                LcflError::Decode(format!("summary line {}: expected 'key = value'", i + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| LcflError::Decode(format!("summary lacks '{k}'")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| LcflError::Decode(format!("summary field '{k}' has bad value '{v}'")))
        }
        let list = |k: &str| -> Result<Vec<f64>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| num(k, x)).collect()
        };
        Ok(Self {
            name: get("name")?.clone(),
            method: get("method")?.clone(),
            seed: num("seed", get("seed")?)?,
            n_clients: num("n_clients", get("n_clients")?)?,
            final_accuracy: list("final_accuracy")?,
            mean_accuracy: num("mean_accuracy", get("mean_accuracy")?)?,
            repeat_accuracy: list("repeat_accuracy")?,
            pretrained_mean: map
                .get("pretrained_mean")
                .map(|v| num("pretrained_mean", v))
                .transpose()?,
            transmissions: num("transmissions", get("transmissions")?)?,
            transmitted_examples: map
                .get("transmitted_examples")
                .map(|v| num("transmitted_examples", v))
                .transpose()?,
            wall_time_s: num("wall_time_s", get("wall_time_s")?)?,
        })
    }
}

/// Everything one repeat produces.
#[derive(Debug, Clone)]
pub struct RepeatResult {
    pub final_accuracy: Vec<f64>,
    pub pretrained_accuracy: Option<Vec<f64>>,
    pub trace: Vec<TracePoint>,
    pub ledger: TransmissionLedger,
    pub records: Vec<SelectionRecord>,
    /// Full workflow report; LC-FL only.
    pub lcfl: Option<LcflReport>,
}

impl RepeatResult {
    pub fn mean_final(&self) -> f64 {
        crate::server::mean(&self.final_accuracy)
    }
}

/// Seed of repeat `r`.
pub fn repeat_seed(base: u64, r: usize) -> u64 {
    base.wrapping_add(r as u64)
}

/// Data of one repeat: the pooled training split, the global test split
/// and the client shards.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Dataset>,
}

pub fn prepare(cfg: &ScenarioConfig, seed: u64) -> Result<Prepared> {
    let data = cfg.dataset.load(seed)?;
    let (train, test) = train_test_split(&data, cfg.test_fraction, seed)?;
    let shards = partition(&train, &cfg.partition, seed)?;
    Ok(Prepared {
        train,
        test,
        shards,
    })
}

/// Untrained client `k`'s model and local training settings.
pub fn client_model(
    cfg: &ScenarioConfig,
    k: usize,
    dim: usize,
    n_classes: usize,
    seed: u64,
) -> Result<(Box<dyn ConfidenceModel>, TrainConfig)> {
    let model = cfg.models[k].build(dim, n_classes, rng::derive(seed, &[0x30DE1, k as u64]))?;
    Ok((
        model,
        cfg.train.with_seed(rng::derive(seed, &[0x7A1, k as u64])),
    ))
}

pub fn build_clients(cfg: &ScenarioConfig, shards: Vec<Dataset>, seed: u64) -> Result<Vec<Client>> {
    shards
        .into_iter()
        .enumerate()
        .map(|(k, shard)| {
            let (model, train) = client_model(cfg, k, shard.dim(), shard.n_classes(), seed)?;
            Ok(Client::new(
                k,
                shard,
                model,
                cfg.generators[k].clone(),
                train,
            ))
        })
        .collect()
}

pub fn lcfl_config(cfg: &ScenarioConfig, seed: u64) -> LcflConfig {
    LcflConfig {
        seed,
        ..cfg.lcfl.clone()
    }
}

/// Executes one repeat in memory.
pub fn run_repeat(cfg: &ScenarioConfig, seed: u64) -> Result<RepeatResult> {
    let Prepared { test, shards, .. } = prepare(cfg, seed)?;
    match cfg.algorithm {
        Algorithm::Lcfl => {
            let mut clients = build_clients(cfg, shards, seed)?;
            let report = run_lcfl(&mut clients, &test, &lcfl_config(cfg, seed))?;
            Ok(RepeatResult {
                final_accuracy: report.final_accuracy.clone(),
                pretrained_accuracy: Some(report.pretrained_accuracy.clone()),
                trace: report.outcome.trace.clone(),
                ledger: report.ledger.clone(),
                records: report.outcome.records.clone(),
                lcfl: Some(report),
            })
        }
        Algorithm::FedAvg | Algorithm::FedProx => {
            let method = if cfg.algorithm == Algorithm::FedAvg {
                FedMethod::FedAvg
            } else {
                FedMethod::FedProx
            };
            let init = ParametricNet::new(
                &cfg.models[0],
                test.dim(),
                test.n_classes(),
                rng::derive(seed, &[0x30DE1]),
            )?;
            let fed = FedConfig {
                seed,
                ..cfg.fed.clone()
            };
            let report = run_federated(method, init, &shards, &test, &fed)?;
            Ok(RepeatResult {
                final_accuracy: vec![report.final_accuracy; shards.len()],
                pretrained_accuracy: None,
                trace: report.trace,
                ledger: report.ledger,
                records: Vec::new(),
                lcfl: None,
            })
        }
    }
}

pub fn write_metrics_csv<W: std::io::Write>(trace: &[TracePoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step",
        "transmissions",
        "client_id",
        "test_accuracy",
        "margin_loss",
    ])?;
    for p in trace {
        let loss = p.margin_loss.map(|l| l.to_string()).unwrap_or_default();
        for (k, acc) in p.accuracy.iter().enumerate() {
            out.write_record([
                p.step.to_string(),
                p.transmissions.to_string(),
                k.to_string(),
                acc.to_string(),
                loss.clone(),
            ])?;
        }
    }
    out.flush().map_err(|e| LcflError::io(METRICS_FILE, e))?;
    Ok(())
}

/// One parsed `metrics.csv` row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub transmissions: usize,
    pub client_id: usize,
    pub test_accuracy: f64,
    pub margin_loss: Option<f64>,
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

fn create(dir: &Path, file: &str) -> Result<fs::File> {
    let path = dir.join(file);
    fs::File::create(&path).map_err(|e| LcflError::io(path, e))
}

/// Runs every repeat and writes the run directory.
pub fn run(cfg: &ScenarioConfig, out: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    let mut first = None;
    let mut repeat_accuracy = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let result = run_repeat(cfg, repeat_seed(cfg.seed, r))?;
        repeat_accuracy.push(result.mean_final());
        if r == 0 {
            first = Some(result);
        }
    }
    let first = first.expect("repeats >= 1");
    let wall_time_s = started.elapsed().as_secs_f64();

    fs::create_dir_all(out).map_err(|e| LcflError::io(out, e))?;
    write_metrics_csv(&first.trace, create(out, METRICS_FILE)?)?;
    first.ledger.write_csv(create(out, LEDGER_FILE)?)?;
    let mut records = std::io::BufWriter::new(create(out, RECORDS_FILE)?);
    write_records_jsonl(&first.records, &mut records)?;
    records
        .flush()
        .map_err(|e| LcflError::io(out.join(RECORDS_FILE), e))?;

    let summary = RunSummary {
        name: cfg.name.clone(),
        method: cfg.algorithm.name().to_string(),
        seed: cfg.seed,
        n_clients: cfg.n_clients(),
        mean_accuracy: first.mean_final(),
        final_accuracy: first.final_accuracy.clone(),
        repeat_accuracy,
        pretrained_mean: first
            .pretrained_accuracy
            .as_deref()
            .map(crate::server::mean),
        transmissions: first.ledger.model_transfers(),
        transmitted_examples: (cfg.algorithm == Algorithm::Lcfl).then_some(first.records.len()),
        wall_time_s,
    };
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, summary.to_text()).map_err(|e| LcflError::io(path, e))?;
    Ok(summary)
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub dir: PathBuf,
    pub name: String,
    pub method: String,
    pub repeats: usize,
    pub mean: f64,
    /// Sample standard deviation over repeats; `None` for a single repeat.
    pub std: Option<f64>,
    pub wall_time_s: f64,
    pub transmissions: usize,
    /// Transmissions relative to the first row.
    pub ratio: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Reads finished run directories. Every unusable directory is reported.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if dirs.len() < 2 {
        return Err(LcflError::invalid(format!(
            "compare needs at least 2 run directories, got {}",
            dirs.len()
        )));
    }
    let mut problems = Vec::new();
    let mut summaries = Vec::new();
    for dir in dirs {
        let path = dir.join(SUMMARY_FILE);
        match fs::read_to_string(&path) {
            Err(e) => problems.push(format!("{}: {e}", path.display())),
            Ok(text) => match RunSummary::parse(&text) {
                Ok(s) => summaries.push((dir.clone(), s)),
                Err(e) => problems.push(format!("{}: {e}", path.display())),
            },
        }
    }
    if !problems.is_empty() {
        return Err(LcflError::invalid(problems.join("\n")));
    }
    let base = summaries[0].1.transmissions.max(1) as f64;
    Ok(summaries
        .into_iter()
        .map(|(dir, s)| {
            let (mean, std) = mean_std(&s.repeat_accuracy);
            CompareRow {
                dir,
                name: s.name,
                method: s.method,
                repeats: s.repeat_accuracy.len(),
                mean,
                std,
                wall_time_s: s.wall_time_s,
                transmissions: s.transmissions,
                ratio: s.transmissions as f64 / base,
            }
        })
        .collect())
}

pub fn render_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("name,method,repeats,mean_accuracy,std_accuracy,wall_time_s,transmissions,transmission_ratio\n");
    for r in rows {
        let std = r.std.map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{},{:.3},{},{:.3}",
            r.name, r.method, r.repeats, r.mean, std, r.wall_time_s, r.transmissions, r.ratio
        );
    }
    s
}

pub fn render_table(rows: &[CompareRow]) -> String {
    let header = [
        "name",
        "method",
        "accuracy",
        "wall time (s)",
        "transmissions",
        "ratio",
    ];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            let acc = match r.std {
                Some(sd) => format!("{:.4} ± {:.4}", r.mean, sd),
                None => format!("{:.4}", r.mean),
            };
            [
                r.name.clone(),
                r.method.clone(),
                acc,
                format!("{:.2}", r.wall_time_s),
                r.transmissions.to_string(),
                format!("{:.3}", r.ratio),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    out.push('\n');
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "tiny"
algorithm = "lcfl"
seed = 3

[dataset]
kind = "blobs"
n_per_class = 20
n_classes = 3
dim = 2
spread = 0.5

[partition]
n_clients = 3
classes_per_client = [1, 2]

[clients]
models = ["logreg", "mlp", "stumps"]
generators = ["gmm", "gmm", "kde"]

[train]
epochs = 5

[lcfl]
iterations = 30
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ScenarioConfig::parse(BASE, "base").unwrap();
        assert_eq!(cfg.n_clients(), 3);
        assert_eq!(
            cfg.models[1],
            ModelSpec::mlp(DEFAULT_HIDDEN, Activation::Tanh)
        );
        assert_eq!(cfg.partition.unequal_skew, 1.0);
        assert_eq!(cfg.lcfl.iterations, 30);
        assert_eq!(
            cfg.lcfl.update_threshold,
            LcflConfig::default().update_threshold
        );
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.repeats, 1);
    }

    #[test]
    fn count_mismatch_points_at_the_list() {
        let src = BASE.replace(
            r#"models = ["logreg", "mlp", "stumps"]"#,
            r#"models = ["logreg", "mlp"]"#,
        );
        let err = ScenarioConfig::parse(&src, "cfg.toml")
            .unwrap_err()
            .to_string();
        let line = src.lines().position(|l| l.starts_with("models")).unwrap() + 1;
        assert!(err.contains(&format!("cfg.toml:{line}:")), "{err}");
        assert!(err.contains("n_clients = 3"), "{err}");
    }

    #[test]
    fn syntax_and_unknown_keys_are_positioned() {
        let err = ScenarioConfig::parse("name = \"x\"\nalgorithm = \n", "a")
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("config error: a:2:"), "{err}");
        let src = BASE.replace("epochs = 5", "epochs = 5\nepoch = 2");
        let err = ScenarioConfig::parse(&src, "b").unwrap_err().to_string();
        let line = src.lines().position(|l| l.starts_with("epoch =")).unwrap() + 1;
        assert!(err.contains(&format!("b:{line}:")), "{err}");
    }

    #[test]
    fn baselines_require_one_parametric_model() {
        let src = BASE.replace(r#"algorithm = "lcfl""#, r#"algorithm = "fedavg""#);
        let err = ScenarioConfig::parse(&src, "c").unwrap_err().to_string();
        assert!(err.contains("c:3:"), "{err}");
        let ok = src.replace(r#"["logreg", "mlp", "stumps"]"#, r#"["mlp", "mlp", "mlp"]"#);
        assert!(ScenarioConfig::parse(&ok, "c").is_ok());
    }

    #[test]
    fn semantic_checks_reach_nested_sections() {
        let src = BASE.replace("iterations = 30", "iterations = 30\nupdate_threshold = 0");
        let err = ScenarioConfig::parse(&src, "d").unwrap_err().to_string();
        assert!(err.contains("update_threshold"), "{err}");
        let src = BASE.replace("classes_per_client = [1, 2]", "classes_per_client = [1, 7]");
        assert!(ScenarioConfig::parse(&src, "d").is_err());
    }

    #[test]
    fn every_preset_parses() {
        for p in PRESETS {
            let cfg = ScenarioConfig::preset(p.name).unwrap_or_else(|e| panic!("{}: {e}", p.name));
            assert_eq!(cfg.name, p.name);
        }
        assert!(ScenarioConfig::preset("nope").is_err());
    }

    #[test]
    fn output_root_follows_config_then_default() {
        let mut cfg = ScenarioConfig::parse(BASE, "base").unwrap();
        cfg.output = Some(PathBuf::from("somewhere"));
        assert_eq!(cfg.default_output(), PathBuf::from("somewhere"));
    }

    #[test]
    fn summary_roundtrips() {
        let s = RunSummary {
            name: "x".into(),
            method: "lcfl".into(),
            seed: 4,
            n_clients: 2,
            final_accuracy: vec![0.5, 0.75],
            mean_accuracy: 0.625,
            repeat_accuracy: vec![0.625, 0.7],
            pretrained_mean: Some(0.4),
            transmissions: 6,
            transmitted_examples: Some(12),
            wall_time_s: 1.5,
        };
        assert_eq!(RunSummary::parse(&s.to_text()).unwrap(), s);
        let fed = RunSummary {
            pretrained_mean: None,
            transmitted_examples: None,
            ..s
        };
        assert_eq!(RunSummary::parse(&fed.to_text()).unwrap(), fed);
    }

    #[test]
    fn sample_std_by_hand() {
        let (m, sd) = mean_std(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!((sd.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3]).1, None);
    }

    #[test]
    fn run_writes_artifacts_that_reparse() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig::parse(BASE, "base").unwrap();
        let summary = run(&cfg, dir.path()).unwrap();
        assert_eq!(summary.transmissions, 9);
        for f in [METRICS_FILE, LEDGER_FILE, RECORDS_FILE, SUMMARY_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let rows =
            read_metrics_csv(fs::File::open(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
        assert!(!rows.is_empty());
        assert!(rows
            .iter()
            .all(|r| r.client_id < 3 && r.margin_loss.is_some()));
        let text = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(RunSummary::parse(&text).unwrap().n_clients, 3);
    }

    #[test]
    fn compare_needs_two_complete_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert!(compare(&[a.path().to_path_buf()]).is_err());
        let err = compare(&[a.path().to_path_buf(), b.path().to_path_buf()])
            .unwrap_err()
            .to_string();
        assert_eq!(err.matches(SUMMARY_FILE).count(), 2, "{err}");

        let cfg = ScenarioConfig::parse(BASE, "base").unwrap();
        run(&cfg, a.path()).unwrap();
        let fed_src = BASE
            .replace(r#"algorithm = "lcfl""#, r#"algorithm = "fedavg""#)
            .replace(
                r#"["logreg", "mlp", "stumps"]"#,
                r#"["logreg", "logreg", "logreg"]"#,
            )
            .replace(
                "[lcfl]\niterations = 30",
                "[fed]\nrounds = 5\nclient_fraction = 0.67",
            );
        let fed = ScenarioConfig::parse(&fed_src, "fed").unwrap();
        run(&fed, b.path()).unwrap();
        let rows = compare(&[a.path().to_path_buf(), b.path().to_path_buf()]).unwrap();
        assert_eq!(rows[0].transmissions, 9);
        assert_eq!(rows[1].transmissions, 5 * 2 * 2);
        assert!((rows[1].ratio - 20.0 / 9.0).abs() < 1e-12);
        let table = render_table(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(render_csv(&rows).starts_with("name,method"));
    }
}
