//! Feedforward scorer mapping an affordance to one score in (0, 1) per base
//! trajectory, trained with the weighted three-flag margin loss.
//!
//! Network: input standardisation, then `Dense -> ReLU -> Dense -> ReLU ->
//! Dense -> sigmoid`. Weights are stored row-major (`out x in`).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Dataset, Flag, AFFORDANCE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Target lower margin for the positive base.
    pub gamma1: f64,
    /// Target upper margin for the negative bases.
    pub gamma2: f64,
    pub w1: f64,
    pub w0: f64,
    pub w0bar: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.7,
            gamma2: 0.3,
            w1: 1.0,
            w0: 1.0,
            w0bar: 5.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |g: f64| (0.0..=1.0).contains(&g);
        if !(in_unit(self.gamma1) && in_unit(self.gamma2) && self.gamma1 > self.gamma2) {
            return Err(Error::Contract(format!(
                "need 0 <= gamma2 < gamma1 <= 1, got gamma1 {} gamma2 {}",
                self.gamma1, self.gamma2
            )));
        }
        if !(self.w1 > 0.0 && self.w0 > 0.0 && self.w0bar > 0.0) {
            return Err(Error::Contract("loss weights must be positive".into()));
        }
        if self.w0bar < self.w0 {
            return Err(Error::Contract("w0bar must be at least w0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// `[input, hidden1, hidden2, output]`.
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Per-feature standardisation `(x - shift) / scale` applied before layer 1.
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
}

/// Gradient with the same layout as [`NetworkParams`] weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    /// Same ordering as [`NetworkParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl NetworkParams {
    /// Glorot-uniform weights, zero biases, identity standardisation.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(Error::Contract(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            input_shift: vec![0.0; sizes[0]],
            input_scale: vec![1.0; sizes[0]],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("sizes is non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.sizes.len().saturating_sub(1);
        if layers == 0 || self.weights.len() != layers || self.biases.len() != layers {
            return Err(Error::Contract("layer count mismatch".into()));
        }
        for (l, w) in self.sizes.windows(2).enumerate() {
            if self.weights[l].len() != w[0] * w[1] || self.biases[l].len() != w[1] {
                return Err(Error::Contract(format!("layer {l} has wrong dimensions")));
            }
        }
        if self.input_shift.len() != self.sizes[0] || self.input_scale.len() != self.sizes[0] {
            return Err(Error::Contract("standardisation length mismatch".into()));
        }
        if self.input_scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::Contract("standardisation scales must be positive".into()));
        }
        let all = self.flat().into_iter().chain(self.input_shift.iter().cloned());
        if all.into_iter().any(|p| !p.is_finite()) {
            return Err(Error::Contract("non-finite parameter".into()));
        }
        Ok(())
    }

    /// All weights and biases, layer by layer (weights then biases).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>();
        if values.len() != total {
            return Err(Error::Contract(format!("expected {total} parameters, got {}", values.len())));
        }
        let mut it = values.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = *it.next().unwrap());
            b.iter_mut().for_each(|x| *x = *it.next().unwrap());
        }
        Ok(())
    }

    fn apply(&mut self, grad: &Gradient, step: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            w.iter_mut().zip(g).for_each(|(x, d)| *x -= step * d);
        }
        for (b, g) in self.biases.iter_mut().zip(&grad.biases) {
            b.iter_mut().zip(g).for_each(|(x, d)| *x -= step * d);
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Activations of one forward pass: `acts[0]` is the standardised input,
/// `pre[l]` the pre-activation of layer `l`.
struct Trace {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn forward_trace(params: &NetworkParams, x: &[f64]) -> Trace {
    let input: Vec<f64> = x
        .iter()
        .zip(params.input_shift.iter().zip(&params.input_scale))
        .map(|(v, (s, c))| (v - s) / c)
        .collect();
    let layers = params.weights.len();
    let mut acts = vec![input];
    let mut pre = Vec::with_capacity(layers);
    for l in 0..layers {
        let (n_in, n_out) = (params.sizes[l], params.sizes[l + 1]);
        let w = &params.weights[l];
        let a = &acts[l];
        let z: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                params.biases[l][o] + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>()
            })
            .collect();
        let out = if l + 1 == layers {
            z.iter().map(|v| sigmoid(*v)).collect()
        } else {
            z.iter().map(|v| v.max(0.0)).collect()
        };
        pre.push(z);
        acts.push(out);
    }
    Trace { acts, pre }
}

/// Scores in (0, 1), one per base.
pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_input(x)?;
    Ok(forward_trace(params, x).acts.pop().expect("at least one layer"))
}

/// Weighted hinge loss of one sample, summed over output coordinates.
pub fn loss(y: &[f64], flags: &[Flag], cfg: &LossConfig) -> f64 {
    y.iter()
        .zip(flags)
        .map(|(yi, f)| match f {
            Flag::Pos => cfg.w1 * (cfg.gamma1 - yi).max(0.0),
            Flag::NegSafe => cfg.w0 * (yi - cfg.gamma2).max(0.0),
            Flag::NegColliding => cfg.w0bar * (yi - cfg.gamma2).max(0.0),
        })
        .sum()
}

/// dJ/dy, with derivative 0 at the hinge kinks.
fn loss_grad(y: &[f64], flags: &[Flag], cfg: &LossConfig) -> Vec<f64> {
    y.iter()
        .zip(flags)
        .map(|(yi, f)| match f {
            Flag::Pos if *yi < cfg.gamma1 => -cfg.w1,
            Flag::NegSafe if *yi > cfg.gamma2 => cfg.w0,
            Flag::NegColliding if *yi > cfg.gamma2 => cfg.w0bar,
            _ => 0.0,
        })
        .collect()
}

fn sample_grad(params: &NetworkParams, x: &[f64], flags: &[Flag], cfg: &LossConfig, out: &mut Gradient) -> f64 {
    let trace = forward_trace(params, x);
    let layers = params.weights.len();
    let y = &trace.acts[layers];
    let j = loss(y, flags, cfg);
    if j == 0.0 {
        return 0.0;
    }
    // delta = dJ/dz for the output layer
    let mut delta: Vec<f64> = loss_grad(y, flags, cfg)
        .iter()
        .zip(y)
        .map(|(g, yi)| g * yi * (1.0 - yi))
        .collect();
    for l in (0..layers).rev() {
        let n_in = params.sizes[l];
        let a = &trace.acts[l];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            out.biases[l][o] += d;
            let row = &mut out.weights[l][o * n_in..(o + 1) * n_in];
            row.iter_mut().zip(a).for_each(|(g, ai)| *g += d * ai);
        }
        if l == 0 {
            break;
        }
        let w = &params.weights[l];
        let below = &trace.pre[l - 1];
        delta = (0..n_in)
            .map(|i| {
                if below[i] <= 0.0 {
                    return 0.0;
                }
                delta.iter().enumerate().map(|(o, d)| d * w[o * n_in + i]).sum()
            })
            .collect();
    }
    j
}

/// One labelled example: features and per-base flags.
pub type Example<'a> = (&'a [f64], &'a [Flag]);

/// Exact gradient of the mean batch loss (subgradient 0 at kinks).
pub fn grad(params: &NetworkParams, batch: &[Example<'_>], cfg: &LossConfig) -> Result<(Gradient, f64)> {
    if batch.is_empty() {
        return Err(Error::Contract("gradient of an empty batch".into()));
    }
    let mut total = Gradient::zeros_like(params);
    let mut j = 0.0;
    for (x, flags) in batch {
        params.check_input(x)?;
        if flags.len() != params.output_dim() {
            return Err(Error::Contract(format!(
                "flag vector has {} entries, network outputs {}",
                flags.len(),
                params.output_dim()
            )));
        }
        let mut g = Gradient::zeros_like(params);
        j += sample_grad(params, x, flags, cfg, &mut g);
        total.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    total.weights.iter_mut().flatten().for_each(|v| *v *= inv);
    total.biases.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok((total, j * inv))
}

/// Mean loss over a dataset.
pub fn mean_loss(params: &NetworkParams, data: &Dataset, cfg: &LossConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in &data.samples {
        let y = forward(params, &s.affordance.to_array())?;
        total += loss(&y, &s.flags, cfg);
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean training loss after each epoch.
    pub loss_history: Vec<f64>,
}

fn standardisation(data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() as f64;
    let mut mean = vec![0.0; AFFORDANCE_DIM];
    for s in &data.samples {
        for (m, v) in mean.iter_mut().zip(s.affordance.to_array()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; AFFORDANCE_DIM];
    for s in &data.samples {
        for ((acc, m), v) in var.iter_mut().zip(&mean).zip(s.affordance.to_array()) {
            *acc += (v - m) * (v - m) / n;
        }
    }
    let scale = var.iter().map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Mini-batch gradient descent with a fixed step. Fully determined by `train_cfg.seed`.
pub fn train(data: &Dataset, hidden: (usize, usize), loss_cfg: &LossConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    loss_cfg.validate()?;
    let m = data
        .output_dim()
        .ok_or_else(|| Error::Contract("cannot train on an empty dataset".into()))?;
    if train_cfg.batch_size == 0 || train_cfg.epochs == 0 || !(train_cfg.learning_rate > 0.0) {
        return Err(Error::Contract("learning rate, batch size and epochs must be positive".into()));
    }
    let mut params = NetworkParams::init(&[AFFORDANCE_DIM, hidden.0, hidden.1, m], train_cfg.seed)?;
    let (shift, scale) = standardisation(data);
    params.input_shift = shift;
    params.input_scale = scale;

    let features: Vec<[f64; AFFORDANCE_DIM]> = data.samples.iter().map(|s| s.affordance.to_array()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| (&features[i][..], &data.samples[i].flags[..]))
                .collect();
            let (mut g, j) = grad(&params, &batch, loss_cfg)?;
            epoch_loss += j * chunk.len() as f64;
            if train_cfg.l2 > 0.0 {
                for (gw, w) in g.weights.iter_mut().zip(&params.weights) {
                    gw.iter_mut().zip(w).for_each(|(d, x)| *d += train_cfg.l2 * x);
                }
            }
            params.apply(&g, train_cfg.learning_rate);
        }
        let epoch_loss = epoch_loss / data.len() as f64;
        if !epoch_loss.is_finite() || params.flat().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
            });
        }
        history.push(epoch_loss);
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

/// Indices of bases whose score reaches their threshold.
pub fn predict_set(params: &NetworkParams, thresholds: &[f64], x: &[f64]) -> Result<Vec<usize>> {
    if thresholds.len() != params.output_dim() {
        return Err(Error::Contract(format!(
            "{} thresholds for {} outputs",
            thresholds.len(),
            params.output_dim()
        )));
    }
    let y = forward(params, x)?;
    Ok(select(&y, thresholds))
}

pub(crate) fn select(scores: &[f64], thresholds: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .zip(thresholds)
        .enumerate()
        .filter(|(_, (y, c))| y >= c)
        .map(|(i, _)| i)
        .collect()
}
