//! One-hidden-layer perceptron with ReLU and softmax cross-entropy, trained by SGD.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::seed::{derive_seed, rng_from_seed, tag};
use crate::{Error, Result};

/// Weights are stored input-major: `w1[i * hidden + j]` connects input `i` to hidden unit `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros(m: &Mlp) -> Self {
        Gradients {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    fn clear(&mut self) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 100,
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// `out[j] = b[j] + sum_i x[i] * w[i * out.len() + j]`
pub(crate) fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = b.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Log-sum-exp stable softmax cross-entropy; writes `softmax - onehot` into `delta`.
fn softmax_xent(logits: &[f64], label: usize, delta: &mut [f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &l) in delta.iter_mut().zip(logits) {
        *d = (l - m).exp();
        z += *d;
    }
    for d in delta.iter_mut() {
        *d /= z;
    }
    delta[label] -= 1.0;
    z.ln() + m - logits[label]
}

impl Mlp {
    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Mlp {
            inputs,
            hidden,
            outputs,
            w1: vec![0.0; inputs * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * outputs],
            b2: vec![0.0; outputs],
        }
    }

    /// He-normal weights, zero biases.
    pub fn init(inputs: usize, hidden: usize, outputs: usize, seed: u64) -> Result<Self> {
        if inputs == 0 || hidden == 0 || outputs < 2 {
            return Err(Error::config(format!("bad network shape {inputs}x{hidden}x{outputs}")));
        }
        let mut m = Mlp::zeros(inputs, hidden, outputs);
        let mut rng = rng_from_seed(derive_seed(seed, tag::TRAIN, 0));
        let n1 = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).unwrap();
        m.w1.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
        m.w2.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        let shapes = [
            (self.w1.len(), self.inputs * self.hidden),
            (self.b1.len(), self.hidden),
            (self.w2.len(), self.hidden * self.outputs),
            (self.b2.len(), self.outputs),
        ];
        for (got, expected) in shapes {
            if got != expected {
                return Err(Error::Dimension { expected, got });
            }
        }
        let all = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite network parameter"));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden];
        affine(x, &self.w1, &self.b1, &mut h);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = vec![0.0; self.outputs];
        affine(&h, &self.w2, &self.b2, &mut out);
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return f64::NAN;
        }
        let hits = (0..data.len())
            .filter(|&i| self.predict(data.image(i)) == data.labels[i] as usize)
            .count();
        hits as f64 / data.len() as f64
    }

    pub fn loss(&self, x: &[f64], label: usize) -> f64 {
        let mut delta = vec![0.0; self.outputs];
        softmax_xent(&self.logits(x), label, &mut delta)
    }

    /// Adds the gradient of the single-sample loss into `grad` and returns the loss.
    pub fn accumulate_gradient(&self, x: &[f64], label: usize, grad: &mut Gradients) -> f64 {
        let (nh, no) = (self.hidden, self.outputs);
        let mut h = vec![0.0; nh];
        affine(x, &self.w1, &self.b1, &mut h);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = vec![0.0; no];
        affine(&h, &self.w2, &self.b2, &mut out);
        let mut d_out = vec![0.0; no];
        let loss = softmax_xent(&out, label, &mut d_out);

        let mut d_h = vec![0.0; nh];
        for j in 0..nh {
            let row = &self.w2[j * no..(j + 1) * no];
            let g = &mut grad.w2[j * no..(j + 1) * no];
            let mut s = 0.0;
            for k in 0..no {
                g[k] += h[j] * d_out[k];
                s += row[k] * d_out[k];
            }
            d_h[j] = if h[j] > 0.0 { s } else { 0.0 };
        }
        for (g, d) in grad.b2.iter_mut().zip(&d_out) {
            *g += d;
        }
        for (g, d) in grad.b1.iter_mut().zip(&d_h) {
            *g += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (g, d) in grad.w1[i * nh..(i + 1) * nh].iter_mut().zip(&d_h) {
                *g += xi * d;
            }
        }
        loss
    }

    pub fn gradient(&self, x: &[f64], label: usize) -> (f64, Gradients) {
        let mut g = Gradients::zeros(self);
        let loss = self.accumulate_gradient(x, label, &mut g);
        (loss, g)
    }

    fn step(&mut self, grad: &Gradients, scale: f64) {
        let pairs = [
            (&mut self.w1, &grad.w1),
            (&mut self.b1, &grad.b1),
            (&mut self.w2, &grad.w2),
            (&mut self.b2, &grad.b2),
        ];
        for (p, g) in pairs {
            for (a, b) in p.iter_mut().zip(g) {
                *a -= scale * b;
            }
        }
    }

    /// JSON checkpoint with a `shape` header.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "shape": [self.inputs, self.hidden, self.outputs],
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Ckpt {
            shape: [usize; 3],
            w1: Vec<f64>,
            b1: Vec<f64>,
            w2: Vec<f64>,
            b2: Vec<f64>,
        }
        let c: Ckpt = serde_json::from_value(v.clone())?;
        let m = Mlp {
            inputs: c.shape[0],
            hidden: c.shape[1],
            outputs: c.shape[2],
            w1: c.w1,
            b1: c.b1,
            w2: c.w2,
            b2: c.b2,
        };
        m.check()?;
        Ok(m)
    }
}

/// Minibatch SGD over a per-epoch shuffled order. Zero epochs returns the initial network.
pub fn train_mlp(data: &Dataset, cfg: &TrainConfig) -> Result<Mlp> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::config("learning_rate must be > 0 and batch_size >= 1"));
    }
    let outputs = data.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(crate::data::N_CLASSES);
    let mut m = Mlp::init(data.dim, cfg.hidden, outputs, cfg.seed)?;
    let mut grad = Gradients::zeros(&m);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, tag::TRAIN, epoch as u64 + 1));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.clear();
            for &i in batch {
                total += m.accumulate_gradient(data.image(i), data.labels[i] as usize, &mut grad);
            }
            m.step(&grad, cfg.learning_rate / batch.len() as f64);
        }
        let loss = total / data.len() as f64;
        if !loss.is_finite() || m.check().is_err() {
            return Err(Error::Diverged { epoch, loss });
        }
    }
    Ok(m)
}
