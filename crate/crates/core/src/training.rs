//! Training loops for the U-Net baseline, pix2pix and the conditional DDPM,
//! with resumable checkpoints and per-step loss logging.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{DiscriminatorConfig, GeneratorConfig};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{derived_rng, random_crop, CropSpec, DataError, VolumeSample};
use crate::diffusion::{graph_training_loss, DiffusionConfig, DiffusionError};
use crate::embedding::{EmbedError, EncoderHandle, TextEmbedding};
use crate::fusion::{embedding_batch, FusionSpec};
use crate::model::{
    default_class_names, image_batch, one_hot_batch, ModelMeta, Networks, SynthesisModel, DISCRIMINATOR_PREFIX,
    GENERATOR_PREFIX, NOISE_PREFIX,
};
use crate::nn::ModelError;
use crate::tabular::{render_record, validate_record, Schema, TabularError, TextDescription};
use crate::tensor::{Adam, AdamConfig, Gradients, Graph};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFinite {
        epoch: usize,
        step: u64,
        term: String,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("subject {subject}: {source}")]
    Record {
        subject: String,
        #[source]
        source: TabularError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Unet,
    Pix2pix,
    Ddpm,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Unet, Backbone::Pix2pix, Backbone::Ddpm];

    pub fn default_adam(self) -> AdamConfig {
        match self {
            Backbone::Unet | Backbone::Pix2pix => AdamConfig {
                beta1: 0.5,
                ..AdamConfig::default()
            },
            Backbone::Ddpm => AdamConfig::default(),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Unet => "unet",
            Backbone::Pix2pix => "pix2pix",
            Backbone::Ddpm => "ddpm",
        })
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|b| b.to_string() == s)
            .ok_or_else(|| format!("unknown backbone `{s}` (expected unet, pix2pix or ddpm)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub backbone: Backbone,
    pub use_text: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub seed: u64,
    /// Write a checkpoint every N epochs (0: only the final one).
    pub checkpoint_every: usize,
    pub adversarial_weight: f64,
    pub l1_weight: f64,
    pub adam: AdamConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub diffusion: DiffusionConfig,
    pub crop: CropSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper_scale(Backbone::Pix2pix)
    }
}

impl TrainConfig {
    /// Full-resolution settings: 1800 epochs with decay from epoch 800,
    /// batch size 2, 256×256×64 crops.
    pub fn paper_scale(backbone: Backbone) -> Self {
        Self {
            backbone,
            use_text: false,
            lr: match backbone {
                Backbone::Ddpm => 1e-5,
                _ => 1e-4,
            },
            batch_size: 2,
            epochs: 1800,
            decay_start_epoch: 800,
            seed: 0,
            checkpoint_every: 100,
            adversarial_weight: 1.0,
            l1_weight: 100.0,
            adam: backbone.default_adam(),
            generator: GeneratorConfig::paper_scale(),
            discriminator: DiscriminatorConfig::paper_scale(),
            diffusion: DiffusionConfig::default(),
            crop: CropSpec::paper_scale(),
        }
    }

    /// Small networks on 16³ crops that train in seconds on a CPU.
    pub fn desk_scale(backbone: Backbone) -> Self {
        Self {
            lr: match backbone {
                Backbone::Ddpm => 2e-3,
                _ => 1e-3,
            },
            epochs: 20,
            decay_start_epoch: 10,
            checkpoint_every: 0,
            generator: GeneratorConfig::desk_scale(),
            discriminator: DiscriminatorConfig::desk_scale(),
            // β_end raised with the shorter chain so that ᾱ_T stays near its
            // 250-step value and x_T is close to pure noise.
            diffusion: DiffusionConfig {
                timesteps: 100,
                beta_end: 5e-2,
                ..DiffusionConfig::default()
            },
            crop: CropSpec::desk_scale(),
            ..Self::paper_scale(backbone)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.decay_start_epoch >= self.epochs {
            return bad(format!(
                "decay_start_epoch {} must be below epochs {}",
                self.decay_start_epoch, self.epochs
            ));
        }
        if !(self.adversarial_weight >= 0.0 && self.l1_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.backbone == Backbone::Unet && self.use_text {
            return bad("the unet baseline has no text pathway".into());
        }
        if !self.use_text && self.generator.fusion.is_some() {
            return bad("generator fusion is configured but use_text is off".into());
        }
        let generator = self.resolved_generator();
        generator.validate()?;
        self.crop.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        generator.check_spatial(&self.crop.size)?;
        if self.backbone == Backbone::Pix2pix {
            let f = 1usize << self.discriminator.downsamplings.min(16);
            if self.crop.size.iter().any(|&s| s % f != 0) {
                return bad(format!(
                    "crop {:?} is not divisible by the discriminator stride {f}",
                    self.crop.size
                ));
            }
        }
        Ok(())
    }

    /// Generator settings with the text fusion filled in: cross-attention at
    /// the bottleneck for pix2pix, affine at every level for diffusion.
    pub fn resolved_generator(&self) -> GeneratorConfig {
        let mut g = self.generator.clone();
        if self.use_text && g.fusion.is_none() {
            g.fusion = match self.backbone {
                Backbone::Pix2pix => Some(FusionSpec::cross_attention(vec![g.depth_levels])),
                Backbone::Ddpm => Some(FusionSpec::affine((0..=g.depth_levels).collect())),
                Backbone::Unet => None,
            };
        }
        g
    }
}

/// Constant rate before `decay_start_epoch`, then linear decay reaching
/// zero one epoch past the end.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.decay_start_epoch {
        config.lr
    } else {
        let remaining = config.epochs.saturating_sub(epoch) as f64;
        config.lr * (remaining / (config.epochs - config.decay_start_epoch) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(format!("rng state: {m}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| corrupt("seed is not hex"))?
            .try_into()
            .map_err(|_| corrupt("seed is not 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| corrupt("bad word position"))?);
        Ok(rng)
    }
}

/// Progress of a run. `epoch` is the next epoch to run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<LossRecord>,
    pub rng: RngState,
    pub last_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Where checkpoints, the loss history and the progress log go.
    pub run_dir: Option<PathBuf>,
    pub schema: Schema,
    pub class_names: Vec<String>,
    /// Stop after this many total epochs, leaving the schedule untouched.
    pub stop_after_epoch: Option<usize>,
    /// Also print progress records to stdout.
    pub echo_progress: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            run_dir: None,
            schema: Schema::default(),
            class_names: default_class_names(4),
            stop_after_epoch: None,
            echo_progress: false,
        }
    }
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LOSS_HISTORY: &str = "loss_history.csv";
pub const PROGRESS_LOG: &str = "progress.jsonl";

/// Owns one model, its optimizers and the training stream.
pub struct Trainer<'a> {
    model: SynthesisModel,
    optimizers: Vec<(&'static str, Adam)>,
    rng: ChaCha8Rng,
    state: TrainState,
    dataset: &'a [VolumeSample],
    texts: Vec<TextDescription>,
    encoder: Option<&'a EncoderHandle>,
    options: TrainOptions,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        dataset: &'a [VolumeSample],
        encoder: Option<&'a EncoderHandle>,
        options: TrainOptions,
    ) -> Result<Self, TrainError> {
        check_encoder(&config, encoder)?;
        let meta = ModelMeta {
            embed_dim: encoder.filter(|_| config.use_text).map(EncoderHandle::dimension),
            encoder: encoder.filter(|_| config.use_text).map(|e| e.config().clone()),
            class_names: options.class_names.clone(),
            config,
        };
        let model = SynthesisModel::build(meta).map_err(config_error)?;
        let optimizers = fresh_optimizers(&model);
        let rng = derived_rng(model.config().seed, "train");
        let state = TrainState {
            epoch: 0,
            step: 0,
            history: Vec::new(),
            rng: RngState::capture(&rng),
            last_checkpoint: None,
        };
        Self::assemble(model, optimizers, rng, state, dataset, encoder, options)
    }

    /// Continue from a checkpoint written by [`Self::save_checkpoint`]. The
    /// checkpoint's configuration wins over any other.
    pub fn resume(
        checkpoint_path: impl AsRef<Path>,
        dataset: &'a [VolumeSample],
        encoder: Option<&'a EncoderHandle>,
        mut options: TrainOptions,
    ) -> Result<Self, TrainError> {
        let path = checkpoint_path.as_ref();
        let ckpt = Checkpoint::read(path)?;
        let model = SynthesisModel::from_checkpoint(&ckpt)?;
        check_encoder(model.config(), encoder)?;
        if let (Some(e), Some(saved)) = (encoder, &model.meta.encoder) {
            if e.encoder_id() != saved.encoder_id {
                return Err(TrainError::Config(format!(
                    "checkpoint was trained with encoder `{}`, got `{}`",
                    saved.encoder_id,
                    e.encoder_id()
                )));
            }
        }
        options.class_names = model.meta.class_names.clone();
        let meta: ResumeMeta = serde_json::from_value(ckpt.metadata.clone()).map_err(CheckpointError::from)?;
        let mut optimizers = fresh_optimizers(&model);
        for (name, opt) in &mut optimizers {
            let steps = *meta
                .optimizers
                .get(*name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("no state for optimizer `{name}`")))?;
            let mut moments = Vec::new();
            for &id in opt.params() {
                let pname = model.store.name(id);
                let get = |kind: &str| {
                    let key = format!("adam/{name}/{kind}/{pname}");
                    ckpt.tensor(&key).cloned().ok_or(CheckpointError::MissingTensor(key))
                };
                moments.push((id, get("m")?, get("v")?));
            }
            opt.restore(steps, moments);
        }
        let rng = meta.rng.restore()?;
        let mut history = Vec::new();
        if let Some(dir) = &options.run_dir {
            let csv_path = dir.join(LOSS_HISTORY);
            if csv_path.exists() {
                history = read_loss_history(&csv_path)?;
                history.retain(|r| r.step < meta.step);
            }
        }
        let state = TrainState {
            epoch: meta.epoch,
            step: meta.step,
            history,
            rng: meta.rng,
            last_checkpoint: Some(path.to_path_buf()),
        };
        Self::assemble(model, optimizers, rng, state, dataset, encoder, options)
    }

    fn assemble(
        model: SynthesisModel,
        optimizers: Vec<(&'static str, Adam)>,
        rng: ChaCha8Rng,
        state: TrainState,
        dataset: &'a [VolumeSample],
        encoder: Option<&'a EncoderHandle>,
        options: TrainOptions,
    ) -> Result<Self, TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let texts = if model.uses_text() {
            dataset
                .iter()
                .map(|s| {
                    validate_record(&s.record, &options.schema)
                        .map(|r| render_record(&r, &options.schema))
                        .map_err(|source| TrainError::Record {
                            subject: s.record.subject_id.clone(),
                            source,
                        })
                })
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            model,
            optimizers,
            rng,
            state,
            dataset,
            texts,
            encoder,
            options,
        })
    }

    pub fn model(&self) -> &SynthesisModel {
        &self.model
    }

    pub fn into_model(self) -> SynthesisModel {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Run the remaining epochs. Returns the path of the final checkpoint
    /// when a run directory is set.
    pub fn run(&mut self) -> Result<Option<PathBuf>, TrainError> {
        let cfg = self.model.config().clone();
        let stop = self.options.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
        if let Some(dir) = &self.options.run_dir {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.clone(),
                source,
            })?;
        }
        let started = Instant::now();
        while self.state.epoch < stop {
            let epoch = self.state.epoch;
            let lr = lr_schedule(epoch, &cfg);
            let mut order: Vec<usize> = (0..self.dataset.len()).collect();
            order.shuffle(&mut self.rng);
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for batch in order.chunks(cfg.batch_size) {
                let losses = self.step(batch, lr)?;
                for (term, value) in losses {
                    let e = sums.entry(term).or_default();
                    e.0 += value;
                    e.1 += 1;
                }
            }
            self.state.epoch += 1;
            self.state.rng = RngState::capture(&self.rng);
            let means: BTreeMap<String, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
            self.log_progress(epoch, lr, &means, started.elapsed().as_secs_f64())?;
            let periodic = cfg.checkpoint_every > 0 && self.state.epoch % cfg.checkpoint_every == 0;
            if periodic && self.state.epoch < cfg.epochs {
                if let Some(dir) = self.options.run_dir.clone() {
                    self.save_checkpoint(dir.join(format!("checkpoint_epoch{:05}.ckpt", self.state.epoch)))?;
                }
            }
        }
        match self.options.run_dir.clone() {
            Some(dir) => {
                let name = if self.state.epoch >= cfg.epochs {
                    FINAL_CHECKPOINT.to_string()
                } else {
                    format!("checkpoint_epoch{:05}.ckpt", self.state.epoch)
                };
                let path = dir.join(name);
                self.save_checkpoint(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }

    /// One optimization step on the given dataset indices. Returns the loss
    /// terms in a fixed order.
    pub fn step(&mut self, indices: &[usize], lr: f64) -> Result<Vec<(String, f64)>, TrainError> {
        let crop = self.model.config().crop.clone();
        let mut crops = Vec::with_capacity(indices.len());
        for &i in indices {
            crops.push(random_crop(&self.dataset[i], &crop, &mut self.rng)?);
        }
        let mask = one_hot_batch(&crops.iter().map(|c| &c.mask).collect::<Vec<_>>(), &self.model.meta.class_names)?;
        let real = image_batch(&crops.iter().map(|c| &c.image).collect::<Vec<_>>())?;
        let embeddings = match (self.model.uses_text(), self.encoder) {
            (true, Some(enc)) => {
                let texts: Vec<TextDescription> = indices.iter().map(|&i| self.texts[i].clone()).collect();
                Some(enc.embed_batch(&texts)?)
            }
            _ => None,
        };
        let emb = embeddings.as_deref();
        let (losses, grads) = match &self.model.networks {
            Networks::Unet(generator) => {
                let mut g = Graph::with_params(&self.model.store);
                let m = g.input(mask.to_dyn());
                let fake = generator.forward(&mut g, m, None, None)?;
                let r = g.input(real.to_dyn());
                let l1 = g.l1(fake, r);
                let value = g.scalar_value(l1);
                (vec![("l1".to_string(), value)], vec![("gen", g.backward(l1))])
            }
            Networks::Pix2pix {
                generator,
                discriminator,
            } => {
                let (w_adv, w_l1) = (self.model.config().adversarial_weight, self.model.config().l1_weight);
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(self.rng.random());
                let mut g = Graph::with_params(&self.model.store);
                let m = g.input(mask.to_dyn());
                let e = embedding_input(&mut g, emb)?;
                let fake = generator.forward(&mut g, m, e, Some(&mut dropout_rng))?;
                let logits = discriminator.forward(&mut g, fake, m)?;
                let adv = g.bce_with_logits(logits, 1.0);
                let r = g.input(real.to_dyn());
                let l1 = g.l1(fake, r);
                let a = g.scale(adv, w_adv);
                let b = g.scale(l1, w_l1);
                let total = g.add(a, b);
                let gen_grads = g.backward(total);
                let (adv_v, l1_v) = (g.scalar_value(adv), g.scalar_value(l1));
                let fake_value = g.value(fake).clone();

                let mut g = Graph::with_params(&self.model.store);
                let m = g.input(mask.to_dyn());
                let r = g.input(real.to_dyn());
                let f = g.input(fake_value);
                let real_logits = discriminator.forward(&mut g, r, m)?;
                let fake_logits = discriminator.forward(&mut g, f, m)?;
                let lr_real = g.bce_with_logits(real_logits, 1.0);
                let lr_fake = g.bce_with_logits(fake_logits, 0.0);
                let sum = g.add(lr_real, lr_fake);
                let d_loss = g.scale(sum, 0.5);
                let disc_grads = g.backward(d_loss);
                (
                    vec![
                        ("g_adv".to_string(), adv_v),
                        ("g_l1".to_string(), l1_v),
                        ("d".to_string(), g.scalar_value(d_loss)),
                    ],
                    vec![("gen", gen_grads), ("disc", disc_grads)],
                )
            }
            Networks::Ddpm { net, schedule } => {
                let mut g = Graph::with_params(&self.model.store);
                let m = g.input(mask.to_dyn());
                let e = embedding_input(&mut g, emb)?;
                let loss = graph_training_loss(&mut g, net, &real, m, e, schedule, &mut self.rng)?;
                let value = g.scalar_value(loss);
                (vec![("eps_mse".to_string(), value)], vec![("eps", g.backward(loss))])
            }
        };
        for (term, value) in &losses {
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: self.state.epoch,
                    step: self.state.step,
                    term: term.clone(),
                    last_checkpoint: self.state.last_checkpoint.clone(),
                });
            }
        }
        apply(&mut self.optimizers, &mut self.model, &grads, lr);
        for (term, value) in &losses {
            self.state.history.push(LossRecord {
                step: self.state.step,
                term: term.clone(),
                value: *value,
            });
        }
        self.state.step += 1;
        Ok(losses)
    }

    /// Checkpoint holding parameters, optimizer moments, the training
    /// stream position and the configuration echo.
    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = self.model.config();
        let mut tensors = self.model.parameter_tensors();
        let mut steps = BTreeMap::new();
        for (name, opt) in &self.optimizers {
            let (step, moments) = opt.state();
            steps.insert(name.to_string(), step);
            for (id, m, v) in moments {
                let pname = self.model.store.name(id);
                tensors.push((format!("adam/{name}/m/{pname}"), m.clone()));
                tensors.push((format!("adam/{name}/v/{pname}"), v.clone()));
            }
        }
        let metadata = serde_json::json!({
            "model": self.model.meta,
            "epoch": self.state.epoch,
            "step": self.state.step,
            "seed": cfg.seed,
            "encoder_id": self.model.meta.encoder.as_ref().map(|e| e.encoder_id.clone()),
            "encoder_checksum": self.encoder.filter(|_| cfg.use_text).map(EncoderHandle::parameter_checksum),
            "loss_weights": {"adversarial": cfg.adversarial_weight, "l1": cfg.l1_weight},
            "rng": RngState::capture(&self.rng),
            "optimizers": steps,
            "parameter_checksum": self.model.store.checksum(),
        });
        Checkpoint { metadata, tensors }
    }

    /// Atomically write the checkpoint and refresh the loss history beside it.
    pub fn save_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        self.checkpoint().write_atomic(path)?;
        if let Some(dir) = path.parent() {
            write_loss_history(&dir.join(LOSS_HISTORY), &self.state.history)?;
        }
        self.state.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    fn log_progress(
        &self,
        epoch: usize,
        lr: f64,
        losses: &BTreeMap<String, f64>,
        elapsed_s: f64,
    ) -> Result<(), TrainError> {
        let record = serde_json::json!({
            "epoch": epoch,
            "step": self.state.step,
            "lr": lr,
            "losses": losses,
            "elapsed_s": elapsed_s,
        });
        let line = record.to_string();
        log::info!("{line}");
        if self.options.echo_progress {
            println!("{line}");
        }
        if let Some(dir) = &self.options.run_dir {
            let path = dir.join(PROGRESS_LOG);
            let io = |source| TrainError::Io {
                path: path.clone(),
                source,
            };
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
            writeln!(f, "{line}").map_err(io)?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct ResumeMeta {
    epoch: usize,
    step: u64,
    rng: RngState,
    optimizers: BTreeMap<String, u64>,
}

fn config_error(e: ModelError) -> TrainError {
    match e {
        ModelError::Config(m) => TrainError::Config(m),
        other => TrainError::Model(other),
    }
}

fn check_encoder(config: &TrainConfig, encoder: Option<&EncoderHandle>) -> Result<(), TrainError> {
    config.validate().map_err(config_error)?;
    match (config.use_text, encoder.is_some()) {
        (true, false) => Err(TrainError::Config("use_text requires a text encoder".into())),
        (false, true) => Err(TrainError::Config("a text encoder was given but use_text is off".into())),
        _ => Ok(()),
    }
}

fn fresh_optimizers(model: &SynthesisModel) -> Vec<(&'static str, Adam)> {
    let adam = model.config().adam;
    let group = |prefix: &str| model.store.ids_with_prefix(prefix).collect::<Vec<_>>();
    match &model.networks {
        Networks::Unet(_) => vec![("gen", Adam::new(adam, &model.store, group(GENERATOR_PREFIX)))],
        Networks::Pix2pix { .. } => vec![
            ("gen", Adam::new(adam, &model.store, group(GENERATOR_PREFIX))),
            ("disc", Adam::new(adam, &model.store, group(DISCRIMINATOR_PREFIX))),
        ],
        Networks::Ddpm { .. } => vec![("eps", Adam::new(adam, &model.store, group(NOISE_PREFIX)))],
    }
}

fn apply(optimizers: &mut [(&'static str, Adam)], model: &mut SynthesisModel, grads: &[(&str, Gradients)], lr: f64) {
    for (name, g) in grads {
        if let Some((_, opt)) = optimizers.iter_mut().find(|(n, _)| n == name) {
            opt.step(&mut model.store, g, lr);
        }
    }
}

fn embedding_input(g: &mut Graph, emb: Option<&[TextEmbedding]>) -> Result<Option<crate::tensor::Var>, ModelError> {
    emb.map(|e| embedding_batch(e).map(|a| g.input(a))).transpose()
}

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for r in history {
        w.serialize(r).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn read_loss_history(path: &Path) -> Result<Vec<LossRecord>, TrainError> {
    let io = |e: csv::Error| TrainError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    csv::Reader::from_path(path)
        .map_err(io)?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(io)
}

fn train_backbone(
    expected: Backbone,
    config: TrainConfig,
    dataset: &[VolumeSample],
    encoder: Option<&EncoderHandle>,
    options: TrainOptions,
) -> Result<(SynthesisModel, Option<PathBuf>), TrainError> {
    if config.backbone != expected {
        return Err(TrainError::Config(format!(
            "expected a {expected} configuration, got {}",
            config.backbone
        )));
    }
    let mut trainer = Trainer::new(config, dataset, encoder, options)?;
    let path = trainer.run()?;
    Ok((trainer.into_model(), path))
}

/// Adversarial plus weighted L1 training of the pix2pix generator.
pub fn train_pix2pix(
    config: TrainConfig,
    dataset: &[VolumeSample],
    encoder: Option<&EncoderHandle>,
    options: TrainOptions,
) -> Result<(SynthesisModel, Option<PathBuf>), TrainError> {
    train_backbone(Backbone::Pix2pix, config, dataset, encoder, options)
}

/// Noise-prediction training of the conditional diffusion model.
pub fn train_ddpm(
    config: TrainConfig,
    dataset: &[VolumeSample],
    encoder: Option<&EncoderHandle>,
    options: TrainOptions,
) -> Result<(SynthesisModel, Option<PathBuf>), TrainError> {
    train_backbone(Backbone::Ddpm, config, dataset, encoder, options)
}

/// L1 reconstruction training of the plain U-Net.
pub fn train_unet(
    config: TrainConfig,
    dataset: &[VolumeSample],
    options: TrainOptions,
) -> Result<(SynthesisModel, Option<PathBuf>), TrainError> {
    train_backbone(Backbone::Unet, config, dataset, None, options)
}

/// Any backbone, dispatched on `config.backbone`.
pub fn train(
    config: TrainConfig,
    dataset: &[VolumeSample],
    encoder: Option<&EncoderHandle>,
    options: TrainOptions,
) -> Result<(SynthesisModel, Option<PathBuf>), TrainError> {
    train_backbone(config.backbone, config, dataset, encoder, options)
}
