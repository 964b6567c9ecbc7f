//! Multi-party multi-class margin.
//!
//! For a model set `H` and a labeled point `(x, y)`:
//!
//! ```text
//! rho_H(x, y) = max_i h_i(x, y) - max_{j, y' != y} h_j(x, y')
//! ```
//!
//! The first maximizer is `i_plus`, the second `(i_minus, y_minus)`, so
//! `rho = h_{i_plus}(x, y) - h_{i_minus}(x, y_minus)`. Ties go to the lowest
//! client id, then the lowest class index. The margin loss of a pool is the
//! fraction of its points with `rho <= 0`.

use crate::data::Dataset;
use crate::error::{LcflError, Result};
use crate::models::ConfidenceModel;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginVerdict {
    pub rho: f64,
    pub i_plus: usize,
    pub i_minus: usize,
    pub y_minus: usize,
}

impl MarginVerdict {
    pub fn is_violation(&self) -> bool {
        self.rho <= 0.0
    }
}

/// Client models keyed by client id, kept sorted by id.
#[derive(Debug, Clone)]
pub struct ModelSet {
    members: Vec<(usize, Box<dyn ConfidenceModel>)>,
}

impl ModelSet {
    pub fn new(mut members: Vec<(usize, Box<dyn ConfidenceModel>)>) -> Result<Self> {
        if members.is_empty() {
            return Err(LcflError::invalid("model set must be non-empty"));
        }
        members.sort_by_key(|(id, _)| *id);
        if members.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(LcflError::invalid("duplicate client id in model set"));
        }
        let (d, c) = (members[0].1.dim(), members[0].1.n_classes());
        if members
            .iter()
            .any(|(_, m)| m.dim() != d || m.n_classes() != c)
        {
            return Err(LcflError::invalid(
                "all models in a set must share input and output dimensions",
            ));
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].1.dim()
    }

    pub fn n_classes(&self) -> usize {
        self.members[0].1.n_classes()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.members.iter().map(|(id, _)| *id).collect()
    }

    pub fn members(&self) -> &[(usize, Box<dyn ConfidenceModel>)] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [(usize, Box<dyn ConfidenceModel>)] {
        &mut self.members
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.members.binary_search_by_key(&id, |(i, _)| *i).ok()
    }

    pub fn get(&self, id: usize) -> Option<&dyn ConfidenceModel> {
        self.position(id).map(|p| self.members[p].1.as_ref())
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut Box<dyn ConfidenceModel>> {
        self.position(id).map(move |p| &mut self.members[p].1)
    }

    pub fn into_members(self) -> Vec<(usize, Box<dyn ConfidenceModel>)> {
        self.members
    }

    /// Confidence vectors of every member at `x`, in id order.
    pub fn confidences(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.members.iter().map(|(_, m)| m.confidence(x)).collect()
    }
}

fn check_label(y: usize, n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(LcflError::invalid("margin needs at least two classes"));
    }
    if y >= n_classes {
        return Err(LcflError::LabelOutOfRange {
            label: y,
            n_classes,
        });
    }
    Ok(())
}

/// Margin from precomputed confidences. `ids[k]` names the owner of
/// `confidences[k]`; ids must be strictly increasing.
pub fn margin_from_confidences(
    ids: &[usize],
    confidences: &[Vec<f64>],
    y: usize,
) -> Result<MarginVerdict> {
    if confidences.is_empty() || ids.len() != confidences.len() {
        return Err(LcflError::invalid(
            "need one id per non-empty confidence row",
        ));
    }
    let c = confidences[0].len();
    check_label(y, c)?;
    if confidences.iter().any(|p| p.len() != c) {
        return Err(LcflError::invalid("confidence rows differ in length"));
    }
    let mut plus = (f64::NEG_INFINITY, 0usize);
    let mut minus = (f64::NEG_INFINITY, 0usize, 0usize);
    // Strict comparisons over id-then-class order keep the first maximizer.
    for (&id, p) in ids.iter().zip(confidences) {
        if p[y] > plus.0 {
            plus = (p[y], id);
        }
        for (k, &v) in p.iter().enumerate() {
            if k != y && v > minus.0 {
                minus = (v, id, k);
            }
        }
    }
    Ok(MarginVerdict {
        rho: plus.0 - minus.0,
        i_plus: plus.1,
        i_minus: minus.1,
        y_minus: minus.2,
    })
}

pub fn mpmc_margin(models: &ModelSet, x: &[f64], y: usize) -> Result<MarginVerdict> {
    check_label(y, models.n_classes())?;
    let conf = models.confidences(x)?;
    margin_from_confidences(&models.ids(), &conf, y)
}

/// Fraction of `pool` whose margin is non-positive.
pub fn margin_loss(models: &ModelSet, pool: &Dataset) -> Result<f64> {
    if pool.is_empty() {
        return Err(LcflError::EmptyDataset("margin pool"));
    }
    let verdicts = par::map(pool.examples(), |ex| mpmc_margin(models, &ex.x, ex.y));
    let mut violations = 0usize;
    for v in verdicts {
        if v?.is_violation() {
            violations += 1;
        }
    }
    Ok(violations as f64 / pool.len() as f64)
}

/// Exhaustive reference implementation used to cross-check
/// [`margin_from_confidences`]. It materializes every candidate and selects
/// with explicit lexicographic keys instead of a running maximum.
pub mod oracle {
    use super::*;

    pub fn margin_oracle_from_confidences(
        ids: &[usize],
        confidences: &[Vec<f64>],
        y: usize,
    ) -> Result<MarginVerdict> {
        if confidences.is_empty() || ids.len() != confidences.len() {
            return Err(LcflError::invalid(
                "need one id per non-empty confidence row",
            ));
        }
        check_label(y, confidences[0].len())?;
        let mut correct: Vec<(f64, usize)> = Vec::new();
        let mut wrong: Vec<(f64, usize, usize)> = Vec::new();
        for (row, &id) in ids.iter().enumerate() {
            for (class, &v) in confidences[row].iter().enumerate() {
                if class == y {
                    correct.push((v, id));
                } else {
                    wrong.push((v, id, class));
                }
            }
        }
        // Best = highest value; among equals the smallest (id, class).
        let best_correct = correct
            .iter()
            .copied()
            .filter(|c| correct.iter().all(|o| o.0 <= c.0))
            .min_by_key(|c| c.1)
            .ok_or_else(|| LcflError::invalid("no candidates"))?;
        let best_wrong = wrong
            .iter()
            .copied()
            .filter(|c| wrong.iter().all(|o| o.0 <= c.0))
            .min_by_key(|c| (c.1, c.2))
            .ok_or_else(|| LcflError::invalid("no candidates"))?;
        Ok(MarginVerdict {
            rho: best_correct.0 - best_wrong.0,
            i_plus: best_correct.1,
            i_minus: best_wrong.1,
            y_minus: best_wrong.2,
        })
    }

    pub fn margin_oracle(models: &ModelSet, x: &[f64], y: usize) -> Result<MarginVerdict> {
        let conf = models.confidences(x)?;
        margin_oracle_from_confidences(&models.ids(), &conf, y)
    }
}

pub use oracle::margin_oracle;

#[cfg(test)]
mod tests {
    use super::oracle::margin_oracle_from_confidences;
    use super::*;
    use crate::data::LabeledExample;
    use crate::error::Result;
    use crate::models::{ModelKind, TrainConfig};
    use proptest::prelude::*;

    /// A model returning a fixed confidence vector everywhere.
    #[derive(Debug, Clone)]
    struct Fixed(Vec<f64>);

    impl ConfidenceModel for Fixed {
        fn kind(&self) -> ModelKind {
            ModelKind::Custom
        }
        fn dim(&self) -> usize {
            1
        }
        fn n_classes(&self) -> usize {
            self.0.len()
        }
        fn confidence(&self, _x: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
        fn fit(&mut self, _: &Dataset, _: &TrainConfig) -> Result<()> {
            Ok(())
        }
        fn update(&mut self, _: &Dataset, _: &TrainConfig) -> Result<()> {
            Ok(())
        }
        fn to_bytes(&self) -> Vec<u8> {
            Vec::new()
        }
        fn clone_box(&self) -> Box<dyn ConfidenceModel> {
            Box::new(self.clone())
        }
    }

    fn set(rows: &[&[f64]]) -> ModelSet {
        ModelSet::new(
            rows.iter()
                .enumerate()
                .map(|(i, r)| {
                    (
                        i + 1,
                        Box::new(Fixed(r.to_vec())) as Box<dyn ConfidenceModel>,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_hot_single_model() {
        let h = set(&[&[1.0, 0.0, 0.0]]);
        let v = mpmc_margin(&h, &[0.0], 0).unwrap();
        assert_eq!(
            v,
            MarginVerdict {
                rho: 1.0,
                i_plus: 1,
                i_minus: 1,
                y_minus: 1
            }
        );
        assert_eq!(margin_oracle(&h, &[0.0], 0).unwrap(), v);
    }

    #[test]
    fn two_models_positive_margin() {
        let h = set(&[&[0.7, 0.2, 0.1], &[0.4, 0.5, 0.1]]);
        let v = mpmc_margin(&h, &[0.0], 0).unwrap();
        assert!((v.rho - 0.2).abs() < 1e-12);
        assert_eq!((v.i_plus, v.i_minus, v.y_minus), (1, 2, 1));
        assert_eq!(margin_oracle(&h, &[0.0], 0).unwrap(), v);
    }

    #[test]
    fn two_models_violation() {
        let h = set(&[&[0.2, 0.6, 0.2], &[0.3, 0.3, 0.4]]);
        let v = mpmc_margin(&h, &[0.0], 0).unwrap();
        assert!((v.rho + 0.3).abs() < 1e-12);
        assert!(v.is_violation());
        assert_eq!((v.i_plus, v.i_minus, v.y_minus), (2, 1, 1));
    }

    #[test]
    fn errors() {
        let h = set(&[&[0.5, 0.5]]);
        assert!(mpmc_margin(&h, &[0.0], 2).is_err());
        assert!(ModelSet::new(vec![]).is_err());
        let dup = vec![
            (
                1,
                Box::new(Fixed(vec![0.5, 0.5])) as Box<dyn ConfidenceModel>,
            ),
            (
                1,
                Box::new(Fixed(vec![0.5, 0.5])) as Box<dyn ConfidenceModel>,
            ),
        ];
        assert!(ModelSet::new(dup).is_err());
        assert!(margin_loss(&h, &Dataset::empty(1, 2)).is_err());
    }

    fn pool(labels: &[usize]) -> Dataset {
        Dataset::new(
            labels
                .iter()
                .map(|&y| LabeledExample::new(vec![0.0], y))
                .collect(),
            1,
            3,
        )
        .unwrap()
    }

    #[test]
    fn loss_counts_non_positive_margins() {
        let h = set(&[&[0.6, 0.3, 0.1], &[0.5, 0.1, 0.4]]);
        // y=0: rho = 0.6 - 0.4 > 0; y=1: 0.3 - 0.6 < 0; y=2: 0.4 - 0.6 < 0
        assert_eq!(margin_loss(&h, &pool(&[0, 0, 0])).unwrap(), 0.0);
        let p = pool(&[0, 0, 0, 1]);
        let recount = p
            .iter()
            .filter(|ex| mpmc_margin(&h, &ex.x, ex.y).unwrap().rho <= 0.0)
            .count() as f64
            / 4.0;
        assert_eq!(recount, 0.25);
        assert_eq!(margin_loss(&h, &p).unwrap(), 0.25);
    }

    #[test]
    fn zero_margin_counts_as_loss() {
        let h = set(&[&[0.5, 0.5, 0.0]]);
        let v = mpmc_margin(&h, &[0.0], 0).unwrap();
        assert_eq!(v.rho, 0.0);
        assert_eq!(margin_loss(&h, &pool(&[0])).unwrap(), 1.0);
    }

    #[test]
    fn ties_resolve_to_lowest_id_then_class() {
        let rows: [&[f64]; 3] = [&[0.2, 0.4, 0.4], &[0.2, 0.4, 0.4], &[0.2, 0.1, 0.7]];
        let ids = [3, 5, 9];
        let conf: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        let v = margin_from_confidences(&ids, &conf, 0).unwrap();
        assert_eq!((v.i_plus, v.i_minus, v.y_minus), (3, 9, 2));
        let conf2: Vec<Vec<f64>> = rows[..2].iter().map(|r| r.to_vec()).collect();
        let v2 = margin_from_confidences(&ids[..2], &conf2, 0).unwrap();
        assert_eq!((v2.i_plus, v2.i_minus, v2.y_minus), (3, 3, 1));
        assert_eq!(
            margin_oracle_from_confidences(&ids[..2], &conf2, 0).unwrap(),
            v2
        );
    }

    fn simplex_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (1usize..=5, 2usize..=6).prop_flat_map(|(n, c)| {
            (
                proptest::collection::vec(proptest::collection::vec(0u8..5, c), n),
                0..c,
            )
                .prop_map(|(raw, y)| {
                    let rows = raw
                        .into_iter()
                        .map(|r| {
                            let w: Vec<f64> = r.iter().map(|&v| v as f64 + 0.5).collect();
                            let s: f64 = w.iter().sum();
                            w.iter().map(|v| v / s).collect()
                        })
                        .collect();
                    (rows, y)
                })
        })
    }

    proptest! {
        // coarse integer weights force frequent exact ties
        #[test]
        fn agrees_with_oracle_and_invariants((rows, y) in simplex_rows()) {
            let ids: Vec<usize> = (0..rows.len()).collect();
            let v = margin_from_confidences(&ids, &rows, y).unwrap();
            let o = margin_oracle_from_confidences(&ids, &rows, y).unwrap();
            prop_assert_eq!(v, o);
            prop_assert!(v.y_minus != y);
            prop_assert!((-1.0..=1.0).contains(&v.rho));
            let decomposed = rows[v.i_plus][y] - rows[v.i_minus][v.y_minus];
            prop_assert!((v.rho - decomposed).abs() < 1e-9);
            for (i, r) in rows.iter().enumerate() {
                prop_assert!(rows[v.i_plus][y] >= r[y]);
                for (k, &p) in r.iter().enumerate() {
                    if k != y {
                        prop_assert!(rows[v.i_minus][v.y_minus] >= p, "row {}", i);
                    }
                }
            }
        }

        #[test]
        fn monotone_in_selected_confidences((rows, y) in simplex_rows(), bump in 0.0f64..0.5) {
            let ids: Vec<usize> = (0..rows.len()).collect();
            let v = margin_from_confidences(&ids, &rows, y).unwrap();
            let mut up = rows.clone();
            up[v.i_plus][y] += bump;
            prop_assert!(margin_from_confidences(&ids, &up, y).unwrap().rho >= v.rho);
            let mut down = rows.clone();
            down[v.i_minus][v.y_minus] += bump;
            prop_assert!(margin_from_confidences(&ids, &down, y).unwrap().rho <= v.rho);
        }
    }
}
