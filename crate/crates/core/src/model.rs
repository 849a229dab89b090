//! A trainable synthesis model: one backbone, its parameters, and the
//! training configuration it was built from.

use ndarray::{stack, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{DiffusionUNet, GeneratorConfig, ImageGenerator, MaskVolume, PatchDiscriminator, DEFAULT_CLASSES};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffusion::{sample, BoundUNet, DiffusionError, NoiseSchedule, SampleOptions, SampleOutput};
use crate::embedding::{EncoderConfig, TextEmbedding};
use crate::fusion::FeatureMap;
use crate::nn::ModelError;
use crate::tensor::ParamStore;
use crate::training::{Backbone, TrainConfig};

pub const GENERATOR_PREFIX: &str = "gen";
pub const DISCRIMINATOR_PREFIX: &str = "disc";
pub const NOISE_PREFIX: &str = "eps";

#[derive(Debug, Clone)]
pub enum Networks {
    Unet(ImageGenerator),
    Pix2pix {
        generator: ImageGenerator,
        discriminator: PatchDiscriminator,
    },
    Ddpm {
        net: DiffusionUNet,
        schedule: NoiseSchedule,
    },
}

/// Everything needed to rebuild a model besides its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub embed_dim: Option<usize>,
    pub encoder: Option<EncoderConfig>,
}

#[derive(Debug, Clone)]
pub struct SynthesisModel {
    pub meta: ModelMeta,
    pub store: ParamStore,
    pub networks: Networks,
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    if num_classes == DEFAULT_CLASSES.len() {
        DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|k| format!("class_{k}")).collect()
    }
}

/// Stack label crops into a one-hot `(B, K, D, H, W)` batch.
pub fn one_hot_batch(masks: &[&Array3<u8>], class_names: &[String]) -> Result<FeatureMap, ModelError> {
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    let data = stack(Axis(0), &views).map_err(|e| ModelError::Shape(format!("mask batch: {e}")))?;
    Ok(MaskVolume::new(data, class_names.to_vec())?.one_hot())
}

/// Stack image crops into a single-channel `(B, 1, D, H, W)` batch.
pub fn image_batch(images: &[&Array3<f64>]) -> Result<FeatureMap, ModelError> {
    let views: Vec<_> = images.iter().map(|m| m.view()).collect();
    let data = stack(Axis(0), &views).map_err(|e| ModelError::Shape(format!("image batch: {e}")))?;
    FeatureMap::new(data.insert_axis(Axis(1)))
}

impl SynthesisModel {
    /// Initialize from `meta.config.seed`. Parameters are allocated in the
    /// order generator, discriminator, so a given seed fixes the generator
    /// weights regardless of which adversary accompanies it.
    pub fn build(meta: ModelMeta) -> Result<Self, ModelError> {
        let cfg = &meta.config;
        cfg.validate()?;
        if cfg.use_text != meta.embed_dim.is_some() {
            return Err(ModelError::Config(
                "an embedding dimension is required exactly when use_text is set".into(),
            ));
        }
        let gen_cfg = GeneratorConfig {
            in_channels: meta.class_names.len(),
            ..cfg.resolved_generator()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let networks = match cfg.backbone {
            Backbone::Unet => Networks::Unet(ImageGenerator::unet(&mut store, &mut rng, GENERATOR_PREFIX, &gen_cfg)?),
            Backbone::Pix2pix => {
                let generator = ImageGenerator::pix2pix(&mut store, &mut rng, GENERATOR_PREFIX, &gen_cfg, meta.embed_dim)?;
                let discriminator = PatchDiscriminator::new(
                    &mut store,
                    &mut rng,
                    DISCRIMINATOR_PREFIX,
                    &cfg.discriminator,
                    gen_cfg.out_channels,
                    gen_cfg.in_channels,
                )?;
                Networks::Pix2pix { generator, discriminator }
            }
            Backbone::Ddpm => {
                let schedule = NoiseSchedule::from_config(&cfg.diffusion).map_err(|e| ModelError::Config(e.to_string()))?;
                let net = DiffusionUNet::new(&mut store, &mut rng, NOISE_PREFIX, &gen_cfg, meta.embed_dim, schedule.len())?;
                Networks::Ddpm { net, schedule }
            }
        };
        Ok(Self { meta, store, networks })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.meta.config
    }

    pub fn uses_text(&self) -> bool {
        self.meta.config.use_text
    }

    pub fn num_classes(&self) -> usize {
        self.meta.class_names.len()
    }

    /// Synthesize a normalized-intensity batch from a one-hot mask batch.
    /// Only the diffusion backbone consumes `rng`.
    pub fn synthesize(
        &self,
        mask: &FeatureMap,
        embedding: Option<&[TextEmbedding]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<FeatureMap, DiffusionError> {
        self.synthesize_with(mask, embedding, rng, 0).map(|o| o.sample)
    }

    /// As [`Self::synthesize`], recording every `snapshot_every`-th reverse
    /// diffusion step.
    pub fn synthesize_with(
        &self,
        mask: &FeatureMap,
        embedding: Option<&[TextEmbedding]>,
        rng: &mut ChaCha8Rng,
        snapshot_every: usize,
    ) -> Result<SampleOutput, DiffusionError> {
        match &self.networks {
            Networks::Unet(generator) | Networks::Pix2pix { generator, .. } => Ok(SampleOutput {
                sample: generator.generate(&self.store, mask, embedding)?,
                snapshots: Vec::new(),
            }),
            Networks::Ddpm { net, schedule } => {
                let [b, _, d, h, w] = mask.shape();
                let options = SampleOptions {
                    sigma_mode: self.meta.config.diffusion.sigma_mode,
                    snapshot_every,
                };
                let bound = BoundUNet { net, store: &self.store };
                sample(&bound, mask, embedding, schedule, rng, [b, net.image_channels, d, h, w], &options)
            }
        }
    }

    /// Parameters as named checkpoint tensors, `param/<name>`.
    pub fn parameter_tensors(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        self.store
            .iter()
            .map(|(_, p)| (format!("param/{}", p.name), p.value.clone()))
            .collect()
    }

    /// Overwrite every parameter from `checkpoint`, checking shapes.
    pub fn load_parameters(&mut self, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = format!("param/{}", self.store.name(id));
            let t = checkpoint.tensor(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let target = self.store.get_mut(id);
            if t.shape() != target.shape() {
                return Err(CheckpointError::TensorShape {
                    name,
                    expected: target.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            target.assign(t);
        }
        Ok(())
    }

    /// Rebuild a model from a checkpoint written by the trainer.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, CheckpointError> {
        let meta: ModelMeta = serde_json::from_value(
            checkpoint
                .metadata
                .get("model")
                .cloned()
                .ok_or_else(|| CheckpointError::Corrupt("metadata has no `model` entry".into()))?,
        )?;
        let mut model = Self::build(meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        model.load_parameters(checkpoint)?;
        Ok(model)
    }
}
