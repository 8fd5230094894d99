//! Score functions: the common contract, an exact Gaussian oracle and the
//! trainable time-conditioned denoiser.
//!
//! Every [`ScoreFunction`] returns the marginal score `∇ log p_t(x_t | μ)`.
//! The denoiser predicts the noise `ε̂` of `x_t = m_t + √v_t ε` and reports
//! `−ε̂ / √v_t`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, shape_err, Error, Result};
use crate::mrsde::{forward_marginal, DiffusionSchedule};
use crate::nets::{add_conv, add_gated_block, add_linear, as_batch, conv, gated_block, linear};
use crate::numerics::container::{read_store, write_store};
use crate::numerics::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub trait ScoreFunction: Sync {
    /// Marginal score at `x_t` for conditioning image `mu` and step `t`.
    fn evaluate(&self, x_t: &Tensor, mu: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor>;

    /// Scores for several independent states at the same step.
    fn evaluate_many(&self, x_t: &[Tensor], mu: &[Tensor], t: usize, sched: &DiffusionSchedule) -> Result<Vec<Tensor>> {
        if x_t.len() != mu.len() {
            return shape_err(format!("{} states but {} conditioning images", x_t.len(), mu.len()));
        }
        x_t.iter().zip(mu).map(|(x, m)| self.evaluate(x, m, t, sched)).collect()
    }
}

/// Diagonal Gaussian prior on `x_0`. Every forward marginal is Gaussian, so
/// the score is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracle {
    pub mean: Tensor,
    pub var: Tensor,
}

impl GaussianOracle {
    pub fn new(mean: Tensor, var: Tensor) -> Result<Self> {
        mean.check_same_shape(&var, "oracle variance")?;
        if var.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return invalid("oracle variances must be finite and non-negative");
        }
        Ok(Self { mean, var })
    }

    /// Mean and per-dimension variance of `x_t` given `mu`.
    pub fn marginal(&self, mu: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<(Tensor, Tensor)> {
        let (m, v) = forward_marginal(&self.mean, mu, t, sched)?;
        let decay2 = (-2.0 * sched.theta_bar(t)).exp();
        let var = self.var.map(|s| decay2 * s + v);
        Ok((m, var))
    }
}

pub fn oracle_score(
    x_t: &Tensor,
    mu: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    oracle: &GaussianOracle,
) -> Result<Tensor> {
    let (m, var) = oracle.marginal(mu, t, sched)?;
    if var.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Numerical(format!("oracle marginal variance is zero at t={t}")));
    }
    let diff = x_t.sub(&m)?;
    diff.zip_map(&var, |d, v| -d / v)
}

impl ScoreFunction for GaussianOracle {
    fn evaluate(&self, x_t: &Tensor, mu: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
        oracle_score(x_t, mu, t, sched, self)
    }
}

/// Sinusoidal embedding: `sin(t f_i)` then `cos(t f_i)` with
/// `f_i = 10000^{−i / (dim/2)}`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return invalid(format!("time embedding dimension must be even and positive, got {dim}"));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    Ok(Tensor::from_vec(out))
}

fn embed_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let rows = ts.iter().map(|&t| time_embedding(t, dim)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    pub emb_dim: usize,
    pub dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 4,
            emb_dim: 32,
            dropout: 0.1,
        }
    }
}

/// Noise-predicting network on `concat(x_t, μ)`. Residual gated blocks;
/// the first and last block input is modulated by a per-channel
/// scale-shift computed from the time embedding.
#[derive(Clone, Debug)]
pub struct CondDenoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

impl CondDenoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.blocks == 0 {
            return invalid("denoiser needs width and blocks >= 1");
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", config.dropout));
        }
        time_embedding(0, config.emb_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = config.width;
        add_conv(&mut p, "in", w, 2, 3, true, 1.0, &mut rng)?;
        for b in 0..config.blocks {
            add_gated_block(&mut p, &format!("block{b}"), w, true, 0.5, &mut rng)?;
        }
        for site in Self::sites(config.blocks) {
            add_linear(&mut p, &format!("{site}.scale"), w, config.emb_dim, 0.5, &mut rng)?;
            add_linear(&mut p, &format!("{site}.shift"), w, config.emb_dim, 0.5, &mut rng)?;
        }
        add_conv(&mut p, "out", 1, w, 3, true, 0.1, &mut rng)?;
        Ok(Self { config, params: p })
    }

    fn sites(blocks: usize) -> Vec<String> {
        let mut s = vec!["temb.first".to_string()];
        if blocks > 1 {
            s.push("temb.last".to_string());
        }
        s
    }

    /// Records the network on `params` (which may differ from
    /// `self.params`). `x_t`, `mu`: `[B, 1, H, W]`; returns `ε̂` of the same
    /// shape. Dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x_t: Var,
        mu: Var,
        emb: &Tensor,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let b = g.value(x_t).shape()[0];
        if emb.shape() != [b, self.config.emb_dim] {
            return shape_err(format!(
                "time embedding must be [{b}, {}], got {:?}",
                self.config.emb_dim,
                emb.shape()
            ));
        }
        let emb = g.input(emb.clone());
        let x = g.concat(x_t, mu)?;
        let mut h = conv(g, params, "in", x)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            h = g.dropout(h, self.config.dropout, rng)?;
        }
        let last = self.config.blocks - 1;
        for blk in 0..self.config.blocks {
            let site = match blk {
                0 => Some("temb.first"),
                _ if blk == last => Some("temb.last"),
                _ => None,
            };
            let u = match site {
                Some(site) => {
                    let s = linear(g, params, &format!("{site}.scale"), emb)?;
                    let t = linear(g, params, &format!("{site}.shift"), emb)?;
                    g.scale_shift(h, s, t)?
                }
                None => h,
            };
            h = gated_block(g, params, &format!("block{blk}"), h, u)?;
        }
        if let Some(rng) = dropout_rng {
            h = g.dropout(h, self.config.dropout, rng)?;
        }
        conv(g, params, "out", h)
    }

    /// Inference-mode noise prediction for `[H, W]` or `[B, H, W]` inputs.
    pub fn predict_noise(&self, x_t: &Tensor, mu: &Tensor, t: usize) -> Result<Tensor> {
        x_t.check_same_shape(mu, "conditioning image")?;
        let shape = x_t.shape().to_vec();
        let (xb, mb) = (as_batch(x_t)?, as_batch(mu)?);
        let b = xb.shape()[0];
        let emb = embed_batch(&vec![t; b], self.config.emb_dim)?;
        let mut g = Graph::new();
        let (xv, mv) = (g.input(xb), g.input(mb));
        let out = self.forward(&mut g, &self.params, xv, mv, &emb, None)?;
        g.value(out).clone().reshape(&shape)
    }

    /// Writes a checkpoint; `extra` is stored alongside the config.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        write_store(path, &self.params, json!({ "kind": "score", "config": self.config, "extra": extra }))
    }

    /// Loads a checkpoint and the `extra` metadata it was saved with.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, meta) = read_store(path)?;
        if meta["kind"] != "score" {
            return Err(Error::Format(format!("{} is not a score checkpoint", path.display())));
        }
        let config: DenoiserConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Format("score checkpoint has unexpected entries".into()));
        }
        for name in model.params.names().map(str::to_string).collect::<Vec<_>>() {
            model.params.set_value(&name, params.value(&name)?.clone())?;
        }
        Ok((model, meta["extra"].clone()))
    }
}

impl ScoreFunction for CondDenoiser {
    fn evaluate(&self, x_t: &Tensor, mu: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
        if t == 0 || t > sched.steps() {
            return invalid(format!("step {t} outside 1..={}", sched.steps()));
        }
        let eps = self.predict_noise(x_t, mu, t)?;
        let sd = sched.variance(t).sqrt();
        Ok(eps.scale(-1.0 / sd))
    }

    fn evaluate_many(&self, x_t: &[Tensor], mu: &[Tensor], t: usize, sched: &DiffusionSchedule) -> Result<Vec<Tensor>> {
        if x_t.len() != mu.len() {
            return shape_err(format!("{} states but {} conditioning images", x_t.len(), mu.len()));
        }
        if x_t.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.evaluate(&Tensor::stack(x_t)?, &Tensor::stack(mu)?, t, sched)?;
        (0..x_t.len()).map(|i| s.index_outer(i)).collect()
    }
}

/// One training example for the noise-prediction loss.
#[derive(Clone, Debug)]
pub struct NoisyBatch {
    pub x_t: Tensor,
    pub mu: Tensor,
    pub noise: Tensor,
    pub ts: Vec<usize>,
}

impl NoisyBatch {
    /// Draws `t ~ U{1..T}` and `x_t ~ p(x_t | x_0)` for each pair.
    pub fn draw(pairs: &[(&Tensor, &Tensor)], sched: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut xs = Vec::with_capacity(pairs.len());
        let mut mus = Vec::with_capacity(pairs.len());
        let mut noises = Vec::with_capacity(pairs.len());
        let mut ts = Vec::with_capacity(pairs.len());
        for (x0, mu) in pairs {
            let t = rng.random_range(1..=sched.steps());
            let (m, v) = forward_marginal(x0, mu, t, sched)?;
            let eps = Tensor::from_fn(m.shape(), |_| rng.sample(StandardNormal));
            xs.push(m.zip_map(&eps, |a, e| a + v.sqrt() * e)?);
            mus.push((*mu).clone());
            noises.push(eps);
            ts.push(t);
        }
        Ok(Self {
            x_t: as_batch(&Tensor::stack(&xs)?)?,
            mu: as_batch(&Tensor::stack(&mus)?)?,
            noise: as_batch(&Tensor::stack(&noises)?)?,
            ts,
        })
    }
}

/// Mean squared noise-prediction error, equal up to the per-step weight
/// `v_t` to the conditional-score regression.
pub fn score_loss(
    model: &CondDenoiser,
    params: &ParamStore,
    g: &mut Graph,
    batch: &NoisyBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let emb = embed_batch(&batch.ts, model.config.emb_dim)?;
    let x = g.input(batch.x_t.clone());
    let mu = g.input(batch.mu.clone());
    let target = g.input(batch.noise.clone());
    let pred = model.forward(g, params, x, mu, &emb, dropout_rng)?;
    g.mse_loss(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 5e-4,
            weight_decay: 0.0,
            cosine: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub(crate) fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            schedule: if self.cosine {
                LrSchedule::Cosine {
                    total_steps: self.steps as u64,
                    min_lr: self.lr * 0.01,
                }
            } else {
                LrSchedule::Constant
            },
            ..Default::default()
        })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return invalid("training needs steps and batch_size >= 1");
        }
        if !(self.lr > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Trains `model` on `(x0, μ)` pairs; returns the per-step loss curve.
pub fn train_score(
    pairs: &[(Tensor, Tensor)],
    sched: &DiffusionSchedule,
    model: &mut CondDenoiser,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return invalid("score training needs at least one (x0, mu) pair");
    }
    if !(sched.lambda2() > 0.0) {
        return invalid("lambda2 = 0 leaves the score target undefined");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<(&Tensor, &Tensor)> = (0..cfg.batch_size)
            .map(|_| {
                let (x, m) = &pairs[rng.random_range(0..pairs.len())];
                (x, m)
            })
            .collect();
        let batch = NoisyBatch::draw(&picks, sched, &mut rng)?;
        let mut g = Graph::new();
        let loss = score_loss(model, &model.params, &mut g, &batch, Some(&mut rng))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("score loss is {value} at step {step}")));
        }
        model.params.zero_grad();
        g.backward(loss, &mut model.params)?;
        adamw_step(&mut model.params, &mut opt)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Means over consecutive windows of `window` values.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
