use crate::codec::{self, Reader, Writer};
use crate::data::{Dataset, LabeledExample};
use crate::error::{LcflError, Result};
use crate::models::{
    check_input, check_training_set, softmax, train_sgd, ConfidenceModel, ModelKind, Parametric,
    TrainConfig,
};

/// Multinomial logistic regression.
///
/// Parameters are stored flat: the `C x d` weight matrix row-major, followed
/// by `C` biases.
///
/// Blob payload: `u32 d, u32 C, f64[C*d + C] params`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    dim: usize,
    n_classes: usize,
    params: Vec<f64>,
}

impl LogisticRegression {
    pub fn new(dim: usize, n_classes: usize) -> Result<Self> {
        if dim == 0 || n_classes < 2 {
            return Err(LcflError::invalid(
                "logistic regression needs d >= 1 and C >= 2",
            ));
        }
        Ok(Self {
            dim,
            n_classes,
            params: vec![0.0; n_classes * dim + n_classes],
        })
    }

    pub fn from_params(dim: usize, n_classes: usize, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(dim, n_classes)?;
        if params.len() != m.params.len() {
            return Err(LcflError::DimensionMismatch {
                expected: m.params.len(),
                actual: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    fn logits(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let (w, b) = params.split_at(self.n_classes * self.dim);
        for (c, o) in out.iter_mut().enumerate() {
            let row = &w[c * self.dim..(c + 1) * self.dim];
            *o = b[c] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, tag) = Reader::open(bytes)?;
        if tag != codec::tag::LOGISTIC {
            return Err(LcflError::Decode(format!(
                "expected logistic tag, got {tag:#04x}"
            )));
        }
        let dim = r.u32()?;
        let n_classes = r.u32()?;
        let expected = n_classes
            .checked_mul(dim)
            .and_then(|v| v.checked_add(n_classes))
            .ok_or_else(|| LcflError::Decode("parameter count overflow".into()))?;
        let params = r.f64s(expected)?;
        r.finish()?;
        Self::from_params(dim, n_classes, params).map_err(|e| LcflError::Decode(e.to_string()))
    }
}

impl Parametric for LogisticRegression {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn loss_grad(
        &self,
        params: &[f64],
        batch: &[&LabeledExample],
        l2: f64,
        grad: &mut [f64],
    ) -> f64 {
        let (d, c) = (self.dim, self.n_classes);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut p = vec![0.0; c];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for ex in batch {
            self.logits(params, &ex.x, &mut p);
            softmax(&mut p);
            loss -= p[ex.y].max(f64::MIN_POSITIVE).ln();
            let (gw, gb) = grad.split_at_mut(c * d);
            for k in 0..c {
                let delta = (p[k] - if k == ex.y { 1.0 } else { 0.0 }) * scale;
                gb[k] += delta;
                for (g, v) in gw[k * d..(k + 1) * d].iter_mut().zip(&ex.x) {
                    *g += delta * v;
                }
            }
        }
        loss *= scale;
        let mut sq = 0.0;
        for (g, &w) in grad.iter_mut().zip(params) {
            *g += l2 * w;
            sq += w * w;
        }
        loss + 0.5 * l2 * sq
    }
}

impl ConfidenceModel for LogisticRegression {
    fn kind(&self) -> ModelKind {
        ModelKind::Logreg
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn confidence(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.dim)?;
        let mut p = vec![0.0; self.n_classes];
        self.logits(&self.params, x, &mut p);
        softmax(&mut p);
        Ok(p)
    }

    fn fit(&mut self, train: &Dataset, cfg: &TrainConfig) -> Result<()> {
        check_training_set(train, self.dim, self.n_classes)?;
        cfg.validate()?;
        if cfg.epochs == 0 {
            return Ok(());
        }
        self.params.iter_mut().for_each(|w| *w = 0.0);
        train_sgd(self, train, cfg, None);
        Ok(())
    }

    fn update(&mut self, batch: &Dataset, cfg: &TrainConfig) -> Result<()> {
        check_training_set(batch, self.dim, self.n_classes)?;
        cfg.validate()?;
        train_sgd(self, batch, cfg, None);
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(codec::tag::LOGISTIC);
        w.u32(self.dim).u32(self.n_classes).f64s(&self.params);
        w.finish()
    }

    fn clone_box(&self) -> Box<dyn ConfidenceModel> {
        Box::new(self.clone())
    }
}
