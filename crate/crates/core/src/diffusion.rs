//! Denoising diffusion: noise schedules, the closed-form forward process,
//! the noise-prediction objective and ancestral sampling.

use ndarray::Zip;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::DiffusionUNet;
use crate::embedding::TextEmbedding;
use crate::fusion::{embedding_batch, FeatureMap};
use crate::nn::ModelError;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside [0, {len})")]
    Timestep { t: usize, len: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values at reverse step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    #[default]
    Linear,
    Cosine,
}

/// Reverse-step noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(default)]
    pub beta_schedule: BetaSchedule,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    /// Keep every N-th intermediate state while sampling (0 disables).
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    2e-2
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 250,
            beta_schedule: BetaSchedule::Linear,
            sigma_mode: SigmaMode::Beta,
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::Schedule("no timesteps".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::Schedule(format!("beta[{i}] = {b} not in (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn linear(timesteps: usize, start: f64, end: f64) -> Result<Self, DiffusionError> {
        let betas = match timesteps {
            0 => Vec::new(),
            1 => vec![start],
            n => (0..n)
                .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
                .collect(),
        };
        Self::from_betas(betas)
    }

    /// Squared-cosine schedule with offset `0.008`, betas capped at `0.999`.
    pub fn cosine(timesteps: usize) -> Result<Self, DiffusionError> {
        let s = 0.008;
        let f = |t: f64| ((t / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let betas = (0..timesteps)
            .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999))
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_config(config: &DiffusionConfig) -> Result<Self, DiffusionError> {
        match config.beta_schedule {
            BetaSchedule::Linear => Self::linear(config.timesteps, config.beta_start, config.beta_end),
            BetaSchedule::Cosine => Self::cosine(config.timesteps),
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t < self.len() {
            Ok(())
        } else {
            Err(DiffusionError::Timestep { t, len: self.len() })
        }
    }

    fn prev_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize, mode: SigmaMode) -> f64 {
        match mode {
            SigmaMode::Beta => self.betas[t].sqrt(),
            SigmaMode::Posterior => {
                (self.betas[t] * (1.0 - self.prev_alpha_bar(t)) / (1.0 - self.alpha_bars[t])).sqrt()
            }
        }
    }
}

fn same_shape(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for an explicit `ᾱ ∈ [0, 1]`.
pub fn mix_with_noise(x0: &FeatureMap, eps: &FeatureMap, alpha_bar: f64) -> Result<FeatureMap, DiffusionError> {
    same_shape(x0, eps, "noise shape")?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(DiffusionError::Schedule(format!("alpha_bar {alpha_bar} not in [0, 1]")));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let out = Zip::from(x0.data()).and(eps.data()).map_collect(|&x, &e| a * x + b * e);
    Ok(FeatureMap::new(out)?)
}

pub fn add_noise(
    x0: &FeatureMap,
    t: usize,
    eps: &FeatureMap,
    schedule: &NoiseSchedule,
) -> Result<FeatureMap, DiffusionError> {
    schedule.check_t(t)?;
    mix_with_noise(x0, eps, schedule.alpha_bars[t])
}

/// Invert the forward process given the noise: `(x_t − √(1−ᾱ)·ε) / √ᾱ`.
pub fn predict_x0(
    x_t: &FeatureMap,
    eps: &FeatureMap,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<FeatureMap, DiffusionError> {
    schedule.check_t(t)?;
    same_shape(x_t, eps, "noise shape")?;
    let ab = schedule.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = Zip::from(x_t.data()).and(eps.data()).map_collect(|&x, &e| (x - b * e) / a);
    Ok(FeatureMap::new(out)?)
}

/// Mean of the reverse step `p(x_{t−1} | x_t)` under predicted noise.
pub fn posterior_mean(
    x_t: &FeatureMap,
    eps: &FeatureMap,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<FeatureMap, DiffusionError> {
    schedule.check_t(t)?;
    same_shape(x_t, eps, "noise shape")?;
    let coef = schedule.betas[t] / (1.0 - schedule.alpha_bars[t]).sqrt();
    let inv = 1.0 / schedule.alphas[t].sqrt();
    let out = Zip::from(x_t.data()).and(eps.data()).map_collect(|&x, &e| inv * (x - coef * e));
    Ok(FeatureMap::new(out)?)
}

/// Anything that predicts the added noise from a noisy volume.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        x_t: &FeatureMap,
        mask: &FeatureMap,
        timesteps: &[usize],
        embedding: Option<&[TextEmbedding]>,
    ) -> Result<FeatureMap, ModelError>;
}

/// A diffusion U-Net paired with its parameters.
pub struct BoundUNet<'a> {
    pub net: &'a DiffusionUNet,
    pub store: &'a ParamStore,
}

impl NoisePredictor for BoundUNet<'_> {
    fn predict_noise(
        &self,
        x_t: &FeatureMap,
        mask: &FeatureMap,
        timesteps: &[usize],
        embedding: Option<&[TextEmbedding]>,
    ) -> Result<FeatureMap, ModelError> {
        let mut g = Graph::with_params(self.store);
        let x = g.input(x_t.to_dyn());
        let m = g.input(mask.to_dyn());
        let e = embedding.map(|e| embedding_batch(e).map(|a| g.input(a))).transpose()?;
        let y = self.net.forward(&mut g, x, m, timesteps, e)?;
        FeatureMap::from_dyn(g.value(y).clone())
    }
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: [usize; 5]) -> FeatureMap {
    let a = ndarray::Array5::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
    FeatureMap::new(a).expect("gaussian draws are finite")
}

/// One training draw: a timestep per batch element, the noise, and the
/// resulting noisy volume.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub timesteps: Vec<usize>,
    pub eps: FeatureMap,
    pub x_t: FeatureMap,
}

impl NoisedBatch {
    pub fn draw<R: Rng + ?Sized>(
        x0: &FeatureMap,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self, DiffusionError> {
        let shape = x0.shape();
        let timesteps: Vec<usize> = (0..shape[0]).map(|_| rng.random_range(0..schedule.len())).collect();
        let eps = gaussian(rng, shape);
        let mut x_t = x0.data().clone();
        for (b, &t) in timesteps.iter().enumerate() {
            let ab = schedule.alpha_bars[t];
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            Zip::from(x_t.index_axis_mut(ndarray::Axis(0), b))
                .and(eps.data().index_axis(ndarray::Axis(0), b))
                .for_each(|x, &e| *x = a * *x + s * e);
        }
        Ok(Self {
            timesteps,
            eps,
            x_t: FeatureMap::new(x_t)?,
        })
    }
}

/// Noise-prediction loss `mean((ε − ε̂(x_t, t))²)` at uniformly drawn `t`.
pub fn training_loss<R: Rng + ?Sized>(
    model: &dyn NoisePredictor,
    x0: &FeatureMap,
    mask: &FeatureMap,
    embedding: Option<&[TextEmbedding]>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64, DiffusionError> {
    let batch = NoisedBatch::draw(x0, schedule, rng)?;
    let pred = model.predict_noise(&batch.x_t, mask, &batch.timesteps, embedding)?;
    same_shape(&pred, &batch.eps, "prediction shape")?;
    let n = pred.data().len() as f64;
    Ok(Zip::from(pred.data())
        .and(batch.eps.data())
        .fold(0.0, |acc, &p, &e| acc + (p - e) * (p - e))
        / n)
}

/// The same objective recorded on a graph for backpropagation.
pub fn graph_training_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &DiffusionUNet,
    x0: &FeatureMap,
    mask: Var,
    embedding: Option<Var>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var, DiffusionError> {
    if net.num_timesteps != schedule.len() {
        return Err(DiffusionError::Schedule(format!(
            "network expects {} timesteps, schedule has {}",
            net.num_timesteps,
            schedule.len()
        )));
    }
    let batch = NoisedBatch::draw(x0, schedule, rng)?;
    let x = g.input(batch.x_t.to_dyn());
    let pred = net.forward(g, x, mask, &batch.timesteps, embedding)?;
    let target = g.input(batch.eps.to_dyn());
    Ok(g.mse(pred, target))
}

#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub sigma_mode: SigmaMode,
    /// Record the state after every N-th reverse step (0 disables).
    pub snapshot_every: usize,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub sample: FeatureMap,
    /// `(t, x_t)` pairs in the order they were produced.
    pub snapshots: Vec<(usize, FeatureMap)>,
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `t = 0`.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Rng + ?Sized>(
    model: &dyn NoisePredictor,
    mask: &FeatureMap,
    embedding: Option<&[TextEmbedding]>,
    schedule: &NoiseSchedule,
    rng: &mut R,
    shape: [usize; 5],
    options: &SampleOptions,
) -> Result<SampleOutput, DiffusionError> {
    let ms = mask.shape();
    if ms[0] != shape[0] || ms[2..] != shape[2..] {
        return Err(DiffusionError::Shape(format!(
            "mask {ms:?} does not match requested shape {shape:?}"
        )));
    }
    let mut x = gaussian(rng, shape);
    let mut snapshots = Vec::new();
    for t in (0..schedule.len()).rev() {
        let ts = vec![t; shape[0]];
        let nan_at_step = |e: ModelError| match e {
            ModelError::NonFinite(_) => DiffusionError::NonFinite { step: t },
            other => DiffusionError::Model(other),
        };
        let eps = model.predict_noise(&x, mask, &ts, embedding).map_err(nan_at_step)?;
        let mean = posterior_mean(&x, &eps, t, schedule).map_err(|e| match e {
            DiffusionError::Model(m) => nan_at_step(m),
            other => other,
        })?;
        x = if t > 0 {
            let sigma = schedule.sigma(t, options.sigma_mode);
            let z = gaussian(rng, shape);
            let next = Zip::from(mean.data()).and(z.data()).map_collect(|&m, &n| m + sigma * n);
            FeatureMap::new(next).map_err(|_| DiffusionError::NonFinite { step: t })?
        } else {
            mean
        };
        if options.snapshot_every > 0 && t % options.snapshot_every == 0 {
            snapshots.push((t, x.clone()));
        }
    }
    Ok(SampleOutput { sample: x, snapshots })
}
