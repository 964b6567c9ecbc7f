//! Labeled datasets, synthetic blob generation, client partitioning and
//! stratified splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LcflError, Result};
use crate::rng;

/// A feature vector with its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl LabeledExample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self { x, y }
    }
}

/// An ordered collection of examples sharing one feature dimension and one
/// class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    dim: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, dim: usize, n_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(LcflError::invalid("feature dimension must be positive"));
        }
        if n_classes == 0 {
            return Err(LcflError::invalid("class count must be positive"));
        }
        for ex in &examples {
            check_example(ex, dim, n_classes)?;
        }
        Ok(Self {
            examples,
            dim,
            n_classes,
        })
    }

    pub fn empty(dim: usize, n_classes: usize) -> Self {
        Self {
            examples: Vec::new(),
            dim,
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> Option<&LabeledExample> {
        self.examples.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledExample> {
        self.examples.iter()
    }

    pub fn into_examples(self) -> Vec<LabeledExample> {
        self.examples
    }

    pub fn push(&mut self, ex: LabeledExample) -> Result<()> {
        check_example(&ex, self.dim, self.n_classes)?;
        self.examples.push(ex);
        Ok(())
    }

    /// Appends every example of `other`.
    pub fn extend_from(&mut self, other: &Dataset) -> Result<()> {
        self.check_compatible(other)?;
        self.examples.extend_from_slice(&other.examples);
        Ok(())
    }

    pub fn check_compatible(&self, other: &Dataset) -> Result<()> {
        if other.dim != self.dim {
            return Err(LcflError::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        if other.n_classes != self.n_classes {
            return Err(LcflError::invalid(format!(
                "class count mismatch: {} vs {}",
                self.n_classes, other.n_classes
            )));
        }
        Ok(())
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            dim: self.dim,
            n_classes: self.n_classes,
        }
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for ex in &self.examples {
            counts[ex.y] += 1;
        }
        counts
    }

    /// Sorted distinct labels present.
    pub fn label_set(&self) -> Vec<usize> {
        self.label_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, _)| l)
            .collect()
    }

    /// Indices of examples grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, ex) in self.examples.iter().enumerate() {
            by_class[ex.y].push(i);
        }
        by_class
    }

    /// Reads `f0,...,f{d-1},label` rows with a mandatory header row.
    pub fn from_csv_path(path: impl AsRef<Path>, n_classes: usize) -> Result<Dataset> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| LcflError::io(path, e))?;
        Self::from_csv_reader(file, n_classes)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R, n_classes: usize) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let width = rdr.headers()?.len();
        if width < 2 {
            return Err(LcflError::invalid(
                "csv header needs at least one feature column and a label column",
            ));
        }
        let dim = width - 1;
        let mut examples = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let mut x = Vec::with_capacity(dim);
            for field in rec.iter().take(dim) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    LcflError::invalid(format!("line {line}: bad feature value {field:?}"))
                })?;
                x.push(v);
            }
            let label_field = rec.get(dim).unwrap_or("").trim();
            let y: usize = label_field.parse().map_err(|_| {
                LcflError::invalid(format!("line {line}: bad label {label_field:?}"))
            })?;
            let ex = LabeledExample::new(x, y);
            check_example(&ex, dim, n_classes)
                .map_err(|e| LcflError::invalid(format!("line {line}: {e}")))?;
            examples.push(ex);
        }
        Dataset::new(examples, dim, n_classes)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        header.push("label".to_string());
        wtr.write_record(&header)?;
        for ex in &self.examples {
            let mut row: Vec<String> = ex.x.iter().map(|v| v.to_string()).collect();
            row.push(ex.y.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| LcflError::io("<csv writer>", e))?;
        Ok(())
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a LabeledExample;
    type IntoIter = std::slice::Iter<'a, LabeledExample>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

fn check_example(ex: &LabeledExample, dim: usize, n_classes: usize) -> Result<()> {
    if ex.x.len() != dim {
        return Err(LcflError::DimensionMismatch {
            expected: dim,
            actual: ex.x.len(),
        });
    }
    if ex.y >= n_classes {
        return Err(LcflError::LabelOutOfRange {
            label: ex.y,
            n_classes,
        });
    }
    if ex.x.iter().any(|v| !v.is_finite()) {
        return Err(LcflError::invalid("non-finite feature value"));
    }
    Ok(())
}

/// Isotropic Gaussian class clusters with seed-determined centers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobModel {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
}

/// Minimum pairwise center distance, in units of `spread`.
pub const BLOB_SEPARATION: f64 = 6.0;

impl BlobModel {
    pub fn new(n_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(LcflError::invalid("blobs need at least 2 classes"));
        }
        if dim == 0 {
            return Err(LcflError::invalid("blob dimension must be positive"));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(LcflError::invalid("spread must be positive"));
        }
        let min_sep = BLOB_SEPARATION * spread;
        let mut half_width = min_sep * (n_classes as f64).powf(1.0 / dim as f64);
        let mut rng = rng::seeded(rng::derive(seed, &[0xB10B]));
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
        let mut attempts = 0usize;
        while centers.len() < n_classes {
            let c: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(-half_width..half_width))
                .collect();
            if centers.iter().all(|o| euclidean(o, &c) >= min_sep) {
                centers.push(c);
                attempts = 0;
            } else {
                attempts += 1;
                if attempts > 1000 {
                    half_width *= 1.1;
                    attempts = 0;
                }
            }
        }
        Ok(Self { centers, spread })
    }

    pub fn n_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Draws `n_per_class` points per class, grouped by class.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(LcflError::invalid(
                "empty class: n_per_class must be positive",
            ));
        }
        let mut rng = rng::seeded(rng::derive(seed, &[0x5A4D]));
        let mut examples = Vec::with_capacity(n_per_class * self.n_classes());
        for (label, center) in self.centers.iter().enumerate() {
            for _ in 0..n_per_class {
                let x = center
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + self.spread * z
                    })
                    .collect();
                examples.push(LabeledExample::new(x, label));
            }
        }
        Dataset::new(examples, self.dim(), self.n_classes())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Gaussian blobs: `n_per_class` points per class around seed-determined
/// centers at least `BLOB_SEPARATION * spread` apart.
pub fn make_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(LcflError::invalid(
            "empty class: n_per_class must be positive",
        ));
    }
    BlobModel::new(n_classes, dim, spread, seed)?.sample(n_per_class, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balance {
    Equal,
    Unequal,
}

/// How a dataset is split across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    /// Inclusive range of label-set sizes per client.
    pub classes_per_client: (usize, usize),
    pub balance: Balance,
    /// Ratio between the largest and smallest per-class allocation weight.
    pub unequal_skew: f64,
}

pub const DEFAULT_UNEQUAL_SKEW: f64 = 4.0;

impl PartitionSpec {
    pub fn equal(n_clients: usize, lo: usize, hi: usize) -> Self {
        Self {
            n_clients,
            classes_per_client: (lo, hi),
            balance: Balance::Equal,
            unequal_skew: 1.0,
        }
    }

    pub fn unequal(n_clients: usize, lo: usize, hi: usize, skew: f64) -> Self {
        Self {
            n_clients,
            classes_per_client: (lo, hi),
            balance: Balance::Unequal,
            unequal_skew: skew,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let (lo, hi) = self.classes_per_client;
        if self.n_clients == 0 {
            return Err(LcflError::InfeasiblePartition(
                "n_clients must be positive".into(),
            ));
        }
        if lo == 0 || lo > hi || hi > n_classes {
            return Err(LcflError::InfeasiblePartition(format!(
                "classes_per_client [{lo}, {hi}] must lie within [1, {n_classes}]"
            )));
        }
        if self.n_clients * hi < n_classes {
            return Err(LcflError::InfeasiblePartition(format!(
                "{} clients with at most {hi} classes each cannot cover {n_classes} classes",
                self.n_clients
            )));
        }
        match self.balance {
            Balance::Equal if self.unequal_skew != 1.0 => Err(LcflError::InfeasiblePartition(
                "equal balance requires unequal_skew = 1".into(),
            )),
            Balance::Unequal if !(self.unequal_skew >= 1.0 && self.unequal_skew.is_finite()) => {
                Err(LcflError::InfeasiblePartition(
                    "unequal_skew must be a finite value >= 1".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Partitions example indices of `ds` into `spec.n_clients` disjoint shards.
///
/// Label-set sizes are drawn uniformly from `classes_per_client`. Classes are
/// first dealt round-robin so every class has an owner, then remaining slots
/// are filled with random unowned-by-that-client classes. Each class's
/// examples are split among its owners: equally (dropping the remainder) or,
/// under `Unequal`, in proportion to log-uniform weights in `[1, skew]`.
pub fn partition_indices(ds: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n_classes = ds.n_classes();
    spec.validate(n_classes)?;
    let n = spec.n_clients;
    let (lo, hi) = spec.classes_per_client;
    let mut rng = rng::seeded(rng::derive(seed, &[0x9A27]));

    let mut sizes: Vec<usize> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    // Top up label-set sizes so that coverage is possible.
    let mut k = 0;
    while sizes.iter().sum::<usize>() < n_classes {
        if sizes[k % n] < hi {
            sizes[k % n] += 1;
        }
        k += 1;
    }

    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut classes: Vec<usize> = (0..n_classes).collect();
    classes.shuffle(&mut rng);
    let mut client = 0;
    for &c in &classes {
        while owned[client % n].len() >= sizes[client % n] {
            client += 1;
        }
        owned[client % n].push(c);
        client += 1;
    }
    for (labels, &size) in owned.iter_mut().zip(&sizes) {
        let mut rest: Vec<usize> = (0..n_classes).filter(|c| !labels.contains(c)).collect();
        rest.shuffle(&mut rng);
        labels.extend(rest.into_iter().take(size - labels.len()));
        labels.sort_unstable();
    }

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (c, mut members) in ds.indices_by_class().into_iter().enumerate() {
        let owners: Vec<usize> = (0..n).filter(|&i| owned[i].contains(&c)).collect();
        members.shuffle(&mut rng);
        let counts = match spec.balance {
            Balance::Equal => vec![members.len() / owners.len(); owners.len()],
            Balance::Unequal => {
                let ln_skew = spec.unequal_skew.ln();
                let weights: Vec<f64> = owners
                    .iter()
                    .map(|_| (rng.random::<f64>() * ln_skew).exp())
                    .collect();
                apportion(members.len(), &weights)
            }
        };
        let mut start = 0;
        for (&owner, &cnt) in owners.iter().zip(&counts) {
            shards[owner].extend_from_slice(&members[start..start + cnt]);
            start += cnt;
        }
    }
    for shard in shards.iter_mut() {
        shard.shuffle(&mut rng);
    }
    Ok(shards)
}

/// Largest-remainder apportionment of `total` items by `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub fn partition(ds: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<Dataset>> {
    Ok(partition_indices(ds, spec, seed)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect())
}

/// Stratified split into `(train, test)`; each class contributes
/// `round(count * test_fraction)` examples to the test side.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(LcflError::invalid(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut rng = rng::seeded(rng::derive(seed, &[0x7E57]));
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for mut members in ds.indices_by_class() {
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        test_idx.extend_from_slice(&members[..n_test]);
        train_idx.extend_from_slice(&members[n_test..]);
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(LcflError::invalid(
            "split leaves one side empty; use more data or another fraction",
        ));
    }
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}
