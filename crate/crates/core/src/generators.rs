//! Data generators fitted on a single client shard, plus the Gaussian
//! mechanism used to privatize them before upload.
//!
//! Two generator families are provided:
//!
//! * [`GmmGenerator`]: per class, a diagonal-covariance Gaussian mixture fitted
//!   by expectation-maximization.
//! * [`KdeGenerator`]: picks a stored shard point of a class and jitters it
//!   with isotropic Gaussian noise of scale `bandwidth`.
//!
//! Both draw labels in proportion to the shard's class counts and never emit
//! a label absent from the shard.

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::data::{Dataset, LabeledExample};
use crate::error::{LcflError, Result};
use crate::{par, rng};

/// Lower bound applied to every fitted variance.
pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const EM_MAX_ITERATIONS: usize = 100;
pub const EM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Gmm,
    Kde,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    fn log_density(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((v, m), var) in x.iter().zip(&self.mean).zip(&self.var) {
            let d = v - m;
            s += -0.5 * (d * d / var + var.ln() + std::f64::consts::TAU.ln());
        }
        s
    }

    fn sample(&self, rng: &mut rng::Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

/// The mixture fitted for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture {
    pub label: usize,
    /// Shard examples of this class; the class prior is proportional to it.
    pub count: usize,
    pub weights: Vec<f64>,
    pub components: Vec<DiagGaussian>,
}

impl ClassMixture {
    /// Mixture mean, `sum_k w_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let dim = self.components[0].mean.len();
        let mut m = vec![0.0; dim];
        for (w, c) in self.weights.iter().zip(&self.components) {
            for (acc, v) in m.iter_mut().zip(&c.mean) {
                *acc += w * v;
            }
        }
        m
    }

    /// Per-coordinate mixture variance.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut var = vec![0.0; mean.len()];
        for (w, c) in self.weights.iter().zip(&self.components) {
            for j in 0..mean.len() {
                let d = c.mean[j] - mean[j];
                var[j] += w * (c.var[j] + d * d);
            }
        }
        var
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmGenerator {
    client_id: usize,
    dim: usize,
    n_classes: usize,
    classes: Vec<ClassMixture>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeGenerator {
    client_id: usize,
    bandwidth: f64,
    points: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Gmm(GmmGenerator),
    Kde(KdeGenerator),
}

/// Fits a class-conditional diagonal GMM on one shard.
///
/// Classes with fewer than `2 * components_per_class` examples get a single
/// Gaussian.
pub fn fit_gmm(shard: &Dataset, components_per_class: usize, seed: u64) -> Result<Generator> {
    if shard.is_empty() {
        return Err(LcflError::EmptyDataset("generator shard"));
    }
    if components_per_class == 0 {
        return Err(LcflError::invalid("components_per_class must be positive"));
    }
    let groups: Vec<(usize, Vec<&LabeledExample>)> = shard
        .indices_by_class()
        .into_iter()
        .enumerate()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(label, idx)| (label, idx.iter().map(|&i| &shard.examples()[i]).collect()))
        .collect();
    let classes = par::map(&groups, |(label, points)| {
        let k = if points.len() < 2 * components_per_class {
            1
        } else {
            components_per_class
        };
        let (weights, components) = if k == 1 {
            (vec![1.0], vec![single_gaussian(points)])
        } else {
            em_diagonal(points, k, rng::derive(seed, &[0xE3, *label as u64]))
        };
        ClassMixture {
            label: *label,
            count: points.len(),
            weights,
            components,
        }
    });
    Ok(Generator::Gmm(GmmGenerator {
        client_id: 0,
        dim: shard.dim(),
        n_classes: shard.n_classes(),
        classes,
    }))
}

/// Kernel-density generator over the shard's points.
pub fn fit_kde(shard: &Dataset, bandwidth: f64, _seed: u64) -> Result<Generator> {
    if shard.is_empty() {
        return Err(LcflError::EmptyDataset("generator shard"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(LcflError::invalid("bandwidth must be positive"));
    }
    Ok(Generator::Kde(KdeGenerator {
        client_id: 0,
        bandwidth,
        points: shard.clone(),
    }))
}

fn single_gaussian(points: &[&LabeledExample]) -> DiagGaussian {
    let dim = points[0].x.len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(&p.x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for p in points {
        for ((s, v), m) in var.iter_mut().zip(&p.x).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut()
        .for_each(|s| *s = (*s / n).max(VARIANCE_FLOOR));
    DiagGaussian { mean, var }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// EM for a diagonal mixture with `k` components, seeded by k-means++.
fn em_diagonal(points: &[&LabeledExample], k: usize, seed: u64) -> (Vec<f64>, Vec<DiagGaussian>) {
    let n = points.len();
    let dim = points[0].x.len();
    let mut rng = rng::seeded(seed);
    let pooled = single_gaussian(points);

    // k-means++ seeding of the means
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].x.clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| {
                        c.iter()
                            .zip(&p.x)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(&mut rng),
            // all points coincide with existing centers
            Err(_) => rng.random_range(0..n),
        };
        centers.push(points[next].x.clone());
    }
    let mut comps: Vec<DiagGaussian> = centers
        .into_iter()
        .map(|mean| DiagGaussian {
            mean,
            var: pooled.var.clone(),
        })
        .collect();
    let mut weights = vec![1.0 / k as f64; k];

    let mut resp = vec![vec![0.0; k]; n];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut logp = vec![0.0; k];
    for _ in 0..EM_MAX_ITERATIONS {
        let mut ll = 0.0;
        for (p, r) in points.iter().zip(resp.iter_mut()) {
            for j in 0..k {
                logp[j] = weights[j].ln() + comps[j].log_density(&p.x);
            }
            let norm = log_sum_exp(&logp);
            ll += norm;
            for j in 0..k {
                r[j] = (logp[j] - norm).exp();
            }
        }
        for j in 0..k {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            if nk < 1e-10 {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for (p, r) in points.iter().zip(&resp) {
                for (m, v) in mean.iter_mut().zip(&p.x) {
                    *m += r[j] * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; dim];
            for (p, r) in points.iter().zip(&resp) {
                for ((s, v), m) in var.iter_mut().zip(&p.x).zip(&mean) {
                    *s += r[j] * (v - m) * (v - m);
                }
            }
            var.iter_mut()
                .for_each(|s| *s = (*s / nk).max(VARIANCE_FLOOR));
            comps[j] = DiagGaussian { mean, var };
            weights[j] = nk / n as f64;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        if (ll - prev_ll).abs() < EM_TOLERANCE {
            break;
        }
        prev_ll = ll;
    }
    (weights, comps)
}

impl Generator {
    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::Gmm(_) => GeneratorKind::Gmm,
            Generator::Kde(_) => GeneratorKind::Kde,
        }
    }

    pub fn client_id(&self) -> usize {
        match self {
            Generator::Gmm(g) => g.client_id,
            Generator::Kde(g) => g.client_id,
        }
    }

    pub fn with_client_id(mut self, id: usize) -> Self {
        match &mut self {
            Generator::Gmm(g) => g.client_id = id,
            Generator::Kde(g) => g.client_id = id,
        }
        self
    }

    pub fn dim(&self) -> usize {
        match self {
            Generator::Gmm(g) => g.dim,
            Generator::Kde(g) => g.points.dim(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Generator::Gmm(g) => g.n_classes,
            Generator::Kde(g) => g.points.n_classes(),
        }
    }

    /// Sorted labels this generator can emit.
    pub fn label_support(&self) -> Vec<usize> {
        match self {
            Generator::Gmm(g) => g.classes.iter().map(|c| c.label).collect(),
            Generator::Kde(g) => g.points.label_set(),
        }
    }

    pub fn as_gmm(&self) -> Option<&GmmGenerator> {
        match self {
            Generator::Gmm(g) => Some(g),
            Generator::Kde(_) => None,
        }
    }

    /// Draws exactly `k` labeled examples.
    pub fn sample(&self, k: usize, seed: u64) -> Result<Dataset> {
        if k == 0 {
            return Err(LcflError::invalid("sample size must be positive"));
        }
        let mut rng = rng::seeded(rng::derive(seed, &[0x6E4]));
        let mut out = Vec::with_capacity(k);
        match self {
            Generator::Gmm(g) => {
                let class_dist = WeightedIndex::new(g.classes.iter().map(|c| c.count))
                    .map_err(|e| LcflError::invalid(format!("class weights: {e}")))?;
                let comp_dists: Vec<WeightedIndex<f64>> = g
                    .classes
                    .iter()
                    .map(|c| WeightedIndex::new(&c.weights))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| LcflError::invalid(format!("mixture weights: {e}")))?;
                for _ in 0..k {
                    let ci = class_dist.sample(&mut rng);
                    let class = &g.classes[ci];
                    let comp = &class.components[comp_dists[ci].sample(&mut rng)];
                    out.push(LabeledExample::new(comp.sample(&mut rng), class.label));
                }
            }
            Generator::Kde(g) => {
                let n = g.points.len();
                for _ in 0..k {
                    // uniform over stored points gives class probability ∝ counts
                    let base = &g.points.examples()[rng.random_range(0..n)];
                    let x = base
                        .x
                        .iter()
                        .map(|v| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            v + g.bandwidth * z
                        })
                        .collect();
                    out.push(LabeledExample::new(x, base.y));
                }
            }
        }
        Dataset::new(out, self.dim(), self.n_classes())
    }

    /// Encodes the generator.
    ///
    /// GMM payload (tag `0x10`): `u32 client, u32 d, u32 C, u32 n_class_entries`,
    /// then per class `u32 label, u32 count, u32 k` and `k x (f64 weight,
    /// f64[d] mean, f64[d] var)`.
    ///
    /// KDE payload (tag `0x11`): `u32 client, u32 d, u32 C, f64 bandwidth,
    /// u32 n`, then `n x (f64[d] x, u32 label)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Generator::Gmm(g) => {
                let mut w = Writer::new(codec::tag::GMM);
                w.u32(g.client_id)
                    .u32(g.dim)
                    .u32(g.n_classes)
                    .u32(g.classes.len());
                for c in &g.classes {
                    w.u32(c.label).u32(c.count).u32(c.components.len());
                    for (wt, comp) in c.weights.iter().zip(&c.components) {
                        w.f64(*wt).f64s(&comp.mean).f64s(&comp.var);
                    }
                }
                w.finish()
            }
            Generator::Kde(g) => {
                let mut w = Writer::new(codec::tag::KDE);
                w.u32(g.client_id)
                    .u32(g.points.dim())
                    .u32(g.points.n_classes())
                    .f64(g.bandwidth)
                    .u32(g.points.len());
                for ex in &g.points {
                    w.f64s(&ex.x).u32(ex.y);
                }
                w.finish()
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Generator> {
        let (mut r, tag) = Reader::open(bytes)?;
        let bad = |m: &str| LcflError::Decode(m.to_string());
        let gen = match tag {
            codec::tag::GMM => {
                let client_id = r.u32()?;
                let dim = r.u32()?;
                let n_classes = r.u32()?;
                let n_entries = r.u32()?;
                let mut classes = Vec::new();
                for _ in 0..n_entries {
                    let label = r.u32()?;
                    let count = r.u32()?;
                    let k = r.u32()?;
                    if label >= n_classes || k == 0 {
                        return Err(bad("bad class entry"));
                    }
                    let mut weights = Vec::new();
                    let mut components = Vec::new();
                    for _ in 0..k {
                        weights.push(r.f64()?);
                        let mean = r.f64s(dim)?;
                        let var = r.f64s(dim)?;
                        components.push(DiagGaussian { mean, var });
                    }
                    classes.push(ClassMixture {
                        label,
                        count,
                        weights,
                        components,
                    });
                }
                if classes.is_empty() || dim == 0 {
                    return Err(bad("empty mixture"));
                }
                Generator::Gmm(GmmGenerator {
                    client_id,
                    dim,
                    n_classes,
                    classes,
                })
            }
            codec::tag::KDE => {
                let client_id = r.u32()?;
                let dim = r.u32()?;
                let n_classes = r.u32()?;
                let bandwidth = r.f64()?;
                let n = r.u32()?;
                let mut examples = Vec::new();
                for _ in 0..n {
                    let x = r.f64s(dim)?;
                    let y = r.u32()?;
                    examples.push(LabeledExample::new(x, y));
                }
                let points = Dataset::new(examples, dim, n_classes)
                    .map_err(|e| LcflError::Decode(e.to_string()))?;
                if points.is_empty() {
                    return Err(bad("empty kde"));
                }
                Generator::Kde(KdeGenerator {
                    client_id,
                    bandwidth,
                    points,
                })
            }
            other => {
                return Err(LcflError::Decode(format!(
                    "unknown generator tag {other:#04x}"
                )))
            }
        };
        r.finish()?;
        Ok(gen)
    }
}

impl GmmGenerator {
    pub fn classes(&self) -> &[ClassMixture] {
        &self.classes
    }
}

impl KdeGenerator {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

/// Declared privacy budget and noise calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
    /// Sensitivity `s_f` of the released quantity.
    pub sensitivity: f64,
    /// Noise multiplier.
    pub sigma: f64,
}

impl DpParams {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(LcflError::invalid("epsilon must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(LcflError::invalid("delta must lie in (0, 1)"));
        }
        if !(self.sensitivity > 0.0 && self.sensitivity.is_finite()) {
            return Err(LcflError::invalid("sensitivity must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(LcflError::invalid("sigma must be positive"));
        }
        Ok(())
    }

    /// Per-coordinate noise standard deviation, `s_f * sigma`.
    pub fn noise_std(&self) -> f64 {
        self.sensitivity * self.sigma
    }
}

/// Returns `values + N(0, (s_f * sigma)^2)` noise, independently per
/// coordinate.
pub fn gaussian_mechanism(values: &[f64], dp: &DpParams, seed: u64) -> Result<Vec<f64>> {
    dp.validate()?;
    let normal = Normal::new(0.0, dp.noise_std())
        .map_err(|e| LcflError::invalid(format!("noise distribution: {e}")))?;
    let mut rng = rng::seeded(rng::derive(seed, &[0xD9]));
    Ok(values.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

/// Perturbs every mixture mean with the Gaussian mechanism. Variances are
/// kept, re-floored. Only GMM generators carry perturbable parameters.
pub fn privatize(gen: &Generator, dp: &DpParams, seed: u64) -> Result<Generator> {
    dp.validate()?;
    let Generator::Gmm(g) = gen else {
        return Err(LcflError::Unsupported(
            "privatize supports GMM generators only".into(),
        ));
    };
    let mut out = g.clone();
    for (ci, class) in out.classes.iter_mut().enumerate() {
        for (k, comp) in class.components.iter_mut().enumerate() {
            comp.mean =
                gaussian_mechanism(&comp.mean, dp, rng::derive(seed, &[ci as u64, k as u64]))?;
            comp.var.iter_mut().for_each(|v| *v = v.max(VARIANCE_FLOOR));
        }
    }
    Ok(Generator::Gmm(out))
}
