use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::data::{Dataset, LabeledExample};
use crate::error::{LcflError, Result};
use crate::models::{
    check_input, check_training_set, softmax, train_sgd, ConfidenceModel, ModelKind, Parametric,
    TrainConfig,
};
use crate::rng;

pub const DEFAULT_HIDDEN: usize = 32;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(LcflError::Decode(format!(
                "unknown activation code {other}"
            ))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation value `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

/// One hidden layer followed by a softmax output.
///
/// Flat parameter layout: `W1 (h x d)`, `b1 (h)`, `W2 (C x h)`, `b2 (C)`,
/// matrices row-major.
///
/// Blob payload: `u32 d, u32 C, u32 h, u8 activation, f64[h*d + h + C*h + C] params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dim: usize,
    n_classes: usize,
    hidden: usize,
    activation: Activation,
    params: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    len: usize,
}

impl Mlp {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(
        dim: usize,
        n_classes: usize,
        hidden: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || n_classes < 2 || hidden == 0 {
            return Err(LcflError::invalid(
                "mlp needs d >= 1, C >= 2 and hidden >= 1",
            ));
        }
        let mut m = Self {
            dim,
            n_classes,
            hidden,
            activation,
            params: Vec::new(),
        };
        m.params = vec![0.0; m.layout().len];
        m.initialize(seed);
        Ok(m)
    }

    pub fn from_params(
        dim: usize,
        n_classes: usize,
        hidden: usize,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut m = Self::new(dim, n_classes, hidden, activation, 0)?;
        if params.len() != m.params.len() {
            return Err(LcflError::DimensionMismatch {
                expected: m.params.len(),
                actual: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn layout(&self) -> Layout {
        let (d, h, c) = (self.dim, self.hidden, self.n_classes);
        Layout {
            w1: 0,
            b1: h * d,
            w2: h * d + h,
            len: h * d + h + c * h + c,
        }
    }

    fn initialize(&mut self, seed: u64) {
        let l = self.layout();
        let (d, h) = (self.dim, self.hidden);
        let mut rng = rng::seeded(rng::derive(seed, &[0x1417]));
        let s1 = 1.0 / (d as f64).sqrt();
        let s2 = 1.0 / (h as f64).sqrt();
        let w2_end = l.w2 + self.n_classes * h;
        for (i, p) in self.params.iter_mut().enumerate() {
            let scale = if i < l.b1 {
                s1
            } else if (l.w2..w2_end).contains(&i) {
                s2
            } else {
                *p = 0.0;
                continue;
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = scale * z;
        }
    }

    /// Hidden activations and output probabilities.
    fn forward(&self, params: &[f64], x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let l = self.layout();
        let (d, h) = (self.dim, self.hidden);
        for j in 0..h {
            let row = &params[l.w1 + j * d..l.w1 + (j + 1) * d];
            let z = params[l.b1 + j] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            hidden[j] = self.activation.apply(z);
        }
        let b2 = l.w2 + self.n_classes * h;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &params[l.w2 + k * h..l.w2 + (k + 1) * h];
            *o = params[b2 + k]
                + row
                    .iter()
                    .zip(hidden.iter())
                    .map(|(a, v)| a * v)
                    .sum::<f64>();
        }
        softmax(out);
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, tag) = Reader::open(bytes)?;
        if tag != codec::tag::MLP {
            return Err(LcflError::Decode(format!(
                "expected mlp tag, got {tag:#04x}"
            )));
        }
        let dim = r.u32()?;
        let n_classes = r.u32()?;
        let hidden = r.u32()?;
        let activation = Activation::from_code(r.u8()?)?;
        let len = hidden
            .checked_mul(dim + 1 + n_classes)
            .and_then(|v| v.checked_add(n_classes))
            .ok_or_else(|| LcflError::Decode("parameter count overflow".into()))?;
        let params = r.f64s(len)?;
        r.finish()?;
        Self::from_params(dim, n_classes, hidden, activation, params)
            .map_err(|e| LcflError::Decode(e.to_string()))
    }
}

impl Parametric for Mlp {
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
        let l = self.layout();
        let (d, h, c) = (self.dim, self.hidden, self.n_classes);
        let b2 = l.w2 + c * h;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut hid = vec![0.0; h];
        let mut p = vec![0.0; c];
        let mut back = vec![0.0; h];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for ex in batch {
            self.forward(params, &ex.x, &mut hid, &mut p);
            loss -= p[ex.y].max(f64::MIN_POSITIVE).ln();
            back.iter_mut().for_each(|b| *b = 0.0);
            for k in 0..c {
                let delta = (p[k] - if k == ex.y { 1.0 } else { 0.0 }) * scale;
                grad[b2 + k] += delta;
                let row = l.w2 + k * h;
                for j in 0..h {
                    grad[row + j] += delta * hid[j];
                    back[j] += delta * params[row + j];
                }
            }
            for j in 0..h {
                let dz = back[j] * self.activation.slope(hid[j]);
                grad[l.b1 + j] += dz;
                let row = l.w1 + j * d;
                for (i, v) in ex.x.iter().enumerate() {
                    grad[row + i] += dz * v;
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

impl ConfidenceModel for Mlp {
    fn kind(&self) -> ModelKind {
        ModelKind::Mlp
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn confidence(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.dim)?;
        let mut hid = vec![0.0; self.hidden];
        let mut p = vec![0.0; self.n_classes];
        self.forward(&self.params, x, &mut hid, &mut p);
        Ok(p)
    }

    fn fit(&mut self, train: &Dataset, cfg: &TrainConfig) -> Result<()> {
        check_training_set(train, self.dim, self.n_classes)?;
        cfg.validate()?;
        if cfg.epochs == 0 {
            return Ok(());
        }
        self.initialize(cfg.seed);
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
        let mut w = Writer::new(codec::tag::MLP);
        w.u32(self.dim)
            .u32(self.n_classes)
            .u32(self.hidden)
            .u8(self.activation.code())
            .f64s(&self.params);
        w.finish()
    }

    fn clone_box(&self) -> Box<dyn ConfidenceModel> {
        Box::new(self.clone())
    }
}
