//! Volumetric generators and the conditional patch discriminator.
//!
//! All three generators share one U-shaped body ([`UNet`]): an input block at
//! full resolution, `depth_levels` stride-2 downsampling stages, a bottleneck,
//! and a mirrored decoder that upsamples, convolves and merges the encoder skip
//! connection of the same level. Level `0` is full resolution and level
//! `depth_levels` is the bottleneck. A fusion unit listed for level `l` acts on
//! the decoder feature of that level (the bottleneck output for the deepest
//! level).
//!
//! Fusion parameters are allocated after every other parameter, so a model
//! built with and without fusion from the same seed shares identical backbone
//! weights.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TextEmbedding;
use crate::fusion::{embedding_batch, make_fusion_stack, FeatureMap, FusionKind, FusionLayer, FusionSpec};
use crate::nn::{timestep_embedding, Activation, Conv3d, ConvBlock, Linear, ModelError};
use crate::tensor::{Graph, ParamStore, Var};

pub const DEFAULT_CLASSES: [&str; 4] = ["background", "right_lung", "left_lung", "airway"];

/// Widest channel multiplier relative to `base_channels`.
const MAX_CHANNEL_MULT: usize = 8;

/// Integer label volume `(B, D, H, W)` with one name per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    data: Array4<u8>,
    class_names: Vec<String>,
}

impl MaskVolume {
    pub fn new(data: Array4<u8>, class_names: Vec<String>) -> Result<Self, ModelError> {
        if class_names.is_empty() || class_names.len() > u8::MAX as usize {
            return Err(ModelError::Config(format!(
                "mask needs between 1 and 255 classes, got {}",
                class_names.len()
            )));
        }
        if data.is_empty() {
            return Err(ModelError::Shape("mask volume is empty".into()));
        }
        let k = class_names.len() as u8;
        if let Some(bad) = data.iter().find(|&&v| v >= k) {
            return Err(ModelError::Argument(format!(
                "mask label {bad} out of range for {k} classes"
            )));
        }
        Ok(Self { data, class_names })
    }

    pub fn with_default_classes(data: Array4<u8>) -> Result<Self, ModelError> {
        Self::new(data, DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect())
    }

    pub fn data(&self) -> &Array4<u8> {
        &self.data
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// `(B, K, D, H, W)` indicator channels.
    pub fn one_hot(&self) -> FeatureMap {
        let [b, d, h, w] = self.shape();
        let k = self.num_classes();
        let mut out = ndarray::Array5::zeros((b, k, d, h, w));
        for ((bi, z, y, x), &label) in self.data.indexed_iter() {
            out[[bi, label as usize, z, y, x]] = 1.0;
        }
        FeatureMap::new(out).expect("one-hot volume is finite and non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth_levels: usize,
    #[serde(default)]
    pub fusion: Option<FusionSpec>,
    /// Decoder dropout probability, applied below full resolution.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::paper_scale()
    }
}

impl GeneratorConfig {
    pub fn paper_scale() -> Self {
        Self {
            in_channels: DEFAULT_CLASSES.len(),
            out_channels: 1,
            base_channels: 32,
            depth_levels: 4,
            fusion: None,
            dropout: 0.0,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            base_channels: 8,
            depth_levels: 2,
            ..Self::paper_scale()
        }
    }

    pub fn with_fusion(mut self, fusion: FusionSpec) -> Self {
        self.fusion = Some(fusion);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth_levels < 2 {
            return Err(ModelError::Config(format!(
                "depth_levels must be at least 2, got {}",
                self.depth_levels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if let Some(spec) = &self.fusion {
            if spec.levels.is_empty() {
                return Err(ModelError::Config("fusion lists no levels".into()));
            }
            let mut seen = spec.levels.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != spec.levels.len() {
                return Err(ModelError::Config("fusion levels contain duplicates".into()));
            }
            if let Some(&l) = seen.iter().find(|&&l| l > self.depth_levels) {
                return Err(ModelError::Config(format!(
                    "fusion level {l} exceeds depth_levels {}",
                    self.depth_levels
                )));
            }
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * (1usize << level).min(MAX_CHANNEL_MULT)
    }

    /// Spatial sizes must be divisible by `2^depth_levels`.
    pub fn check_spatial(&self, dims: &[usize]) -> Result<(), ModelError> {
        let f = 1usize << self.depth_levels;
        if dims.is_empty() || dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(ModelError::Shape(format!(
                "spatial dims {dims:?} not divisible by 2^{} = {f}",
                self.depth_levels
            )));
        }
        Ok(())
    }
}

/// Shared U-shaped body. See the module docs for the layout.
#[derive(Debug, Clone)]
pub struct UNet {
    config: GeneratorConfig,
    embed_dim: Option<usize>,
    input: ConvBlock,
    down: Vec<ConvBlock>,
    enc: Vec<ConvBlock>,
    mid: ConvBlock,
    up: Vec<ConvBlock>,
    merge: Vec<ConvBlock>,
    out: Conv3d,
    bounded: bool,
    time: Option<TimeConditioning>,
    fusion: Vec<(usize, FusionLayer)>,
}

/// Sinusoidal timestep features, a perceptron, and one projection per block.
#[derive(Debug, Clone)]
struct TimeConditioning {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
    /// Order: input, enc[0..L], mid, merge[L-1..=0].
    proj: Vec<Linear>,
}

impl TimeConditioning {
    fn embed(&self, g: &mut Graph, timesteps: &[usize]) -> Var {
        let t = g.input(timestep_embedding(timesteps, self.dim));
        let h = self.fc1.forward(g, t);
        let h = g.silu(h);
        let h = self.fc2.forward(g, h);
        g.silu(h)
    }
}

impl UNet {
    fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        config: &GeneratorConfig,
        embed_dim: Option<usize>,
        with_time: bool,
        bounded: bool,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let levels = config.depth_levels;
        let ch = |l: usize| config.channels_at(l);
        let act = Activation::Silu;

        let input = ConvBlock::new(store, rng, &format!("{name}.in"), config.in_channels, ch(0), 3, 1, act);
        let mut down = Vec::with_capacity(levels);
        let mut enc = Vec::with_capacity(levels);
        for l in 1..=levels {
            down.push(ConvBlock::new(store, rng, &format!("{name}.down{l}"), ch(l - 1), ch(l), 3, 2, act));
            enc.push(ConvBlock::new(store, rng, &format!("{name}.enc{l}"), ch(l), ch(l), 3, 1, act));
        }
        let mid = ConvBlock::new(store, rng, &format!("{name}.mid"), ch(levels), ch(levels), 3, 1, act);
        let mut up = Vec::with_capacity(levels);
        let mut merge = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            up.push(ConvBlock::new(store, rng, &format!("{name}.up{l}"), ch(l + 1), ch(l), 3, 1, act));
            merge.push(ConvBlock::new(store, rng, &format!("{name}.merge{l}"), 2 * ch(l), ch(l), 3, 1, act));
        }
        let out = Conv3d::new(store, rng, &format!("{name}.out"), ch(0), config.out_channels, 1, 1, 0);

        let time = with_time.then(|| {
            let dim = 4 * config.base_channels;
            let mut block_channels = vec![ch(0)];
            block_channels.extend((1..=levels).map(ch));
            block_channels.push(ch(levels));
            block_channels.extend((0..levels).rev().map(ch));
            TimeConditioning {
                dim,
                fc1: Linear::new(store, rng, &format!("{name}.time.fc1"), dim, dim),
                fc2: Linear::new(store, rng, &format!("{name}.time.fc2"), dim, dim),
                proj: block_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| Linear::new(store, rng, &format!("{name}.time.proj{i}"), dim, c))
                    .collect(),
            }
        });

        let fusion = match (&config.fusion, embed_dim) {
            (Some(spec), Some(e)) => {
                let chans: Vec<usize> = spec.levels.iter().map(|&l| ch(l)).collect();
                let stack = make_fusion_stack(store, rng, &format!("{name}.fusion"), spec, &chans, e)?;
                spec.levels.iter().copied().zip(stack).collect()
            }
            (Some(_), None) => {
                return Err(ModelError::Config("fusion configured without an embedding dimension".into()))
            }
            (None, _) => Vec::new(),
        };

        Ok(Self {
            config: config.clone(),
            embed_dim,
            input,
            down,
            enc,
            mid,
            up,
            merge,
            out,
            bounded,
            time,
            fusion,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.embed_dim
    }

    pub fn has_fusion(&self) -> bool {
        !self.fusion.is_empty()
    }

    pub fn fusion_layers(&self) -> impl Iterator<Item = (usize, &FusionLayer)> {
        self.fusion.iter().map(|(l, f)| (*l, f))
    }

    fn fuse_at(&self, g: &mut Graph, level: usize, x: Var, emb: Option<Var>) -> Result<Var, ModelError> {
        match emb {
            Some(e) => self
                .fusion
                .iter()
                .filter(|(l, _)| *l == level)
                .try_fold(x, |h, (_, unit)| unit.forward(g, h, e)),
            None => Ok(x),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        timesteps: Option<&[usize]>,
        emb: Option<Var>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(ModelError::Shape(format!(
                "expected input (B, {}, D, H, W), got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config.check_spatial(&shape[2..])?;
        if emb.is_some() && self.fusion.is_empty() {
            return Err(ModelError::Config("embedding given but no fusion is configured".into()));
        }
        if let Some(e) = emb {
            let es = g.shape(e);
            if es.len() != 2 || es[0] != shape[0] || Some(es[1]) != self.embed_dim {
                return Err(ModelError::Shape(format!(
                    "embedding must be [{}, {}], got {es:?}",
                    shape[0],
                    self.embed_dim.unwrap_or(0)
                )));
            }
        }

        let temb = match (&self.time, timesteps) {
            (Some(tc), Some(ts)) => Some(tc.embed(g, ts)),
            (Some(_), None) => return Err(ModelError::Argument("timestep required".into())),
            (None, _) => None,
        };
        let mut inject_idx = 0;
        let mut inject = |g: &mut Graph, h: Var| -> Var {
            let out = match (&self.time, temb) {
                (Some(tc), Some(t)) => {
                    let s = tc.proj[inject_idx].forward(g, t);
                    g.channel_add(h, s)
                }
                _ => h,
            };
            inject_idx += 1;
            out
        };

        let levels = self.config.depth_levels;
        let mut skips = Vec::with_capacity(levels);
        let h = self.input.forward(g, x);
        let mut h = inject(g, h);
        for l in 0..levels {
            skips.push(h);
            h = self.down[l].forward(g, h);
            h = self.enc[l].forward(g, h);
            h = inject(g, h);
        }
        h = self.mid.forward(g, h);
        h = inject(g, h);
        h = self.fuse_at(g, levels, h, emb)?;

        for (i, level) in (0..levels).rev().enumerate() {
            let u = g.upsample2x(h);
            let u = self.up[i].forward(g, u);
            let cat = g.concat_channels(&[u, skips[level]]);
            h = self.merge[i].forward(g, cat);
            h = inject(g, h);
            if level > 0 && self.config.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let keep_p = 1.0 - self.config.dropout;
                    let keep = ArrayD::from_shape_simple_fn(IxDyn(g.shape(h)), || {
                        if rng.random::<f64>() < keep_p { 1.0 } else { 0.0 }
                    });
                    h = g.dropout(h, keep, self.config.dropout);
                }
            }
            h = self.fuse_at(g, level, h, emb)?;
        }
        let y = self.out.forward(g, h);
        Ok(if self.bounded { g.tanh(y) } else { y })
    }
}

/// Mask-to-image generator with a bounded output: the pure U-Net baseline
/// (no fusion) and the pix2pix generator (cross-attention fusion).
#[derive(Debug, Clone)]
pub struct ImageGenerator {
    pub body: UNet,
}

impl ImageGenerator {
    /// Plain U-Net; any fusion entry in `config` is rejected.
    pub fn unet<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        config: &GeneratorConfig,
    ) -> Result<Self, ModelError> {
        if config.fusion.is_some() {
            return Err(ModelError::Config("the plain U-Net takes no text fusion".into()));
        }
        Ok(Self {
            body: UNet::build(store, rng, name, config, None, false, true)?,
        })
    }

    /// Pix2pix generator. Text fusion, if configured, must be cross-attention.
    pub fn pix2pix<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        config: &GeneratorConfig,
        embed_dim: Option<usize>,
    ) -> Result<Self, ModelError> {
        if let Some(spec) = &config.fusion {
            if spec.kind != FusionKind::CrossAttention {
                return Err(ModelError::Config(
                    "pix2pix text fusion must be cross_attention".into(),
                ));
            }
        }
        Ok(Self {
            body: UNet::build(store, rng, name, config, embed_dim, false, true)?,
        })
    }

    /// `mask` is the one-hot volume; `dropout_rng` enables decoder dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        mask: Var,
        emb: Option<Var>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        self.body.forward(g, mask, None, emb, dropout_rng)
    }

    /// Inference outside a training graph.
    pub fn generate(
        &self,
        store: &ParamStore,
        mask: &FeatureMap,
        embedding: Option<&[TextEmbedding]>,
    ) -> Result<FeatureMap, ModelError> {
        let mut g = Graph::with_params(store);
        let m = g.input(mask.to_dyn());
        let e = embedding.map(|e| embedding_batch(e).map(|a| g.input(a))).transpose()?;
        let y = self.forward(&mut g, m, e, None)?;
        FeatureMap::from_dyn(g.value(y).clone())
    }
}

/// Noise-predicting U-Net over `noisy ∥ mask one-hot`, conditioned on the
/// timestep at every block and optionally on text through affine fusion.
#[derive(Debug, Clone)]
pub struct DiffusionUNet {
    pub body: UNet,
    pub image_channels: usize,
    pub num_timesteps: usize,
}

impl DiffusionUNet {
    /// `config.in_channels` counts the mask classes only; the noisy image
    /// channels (`config.out_channels`) are prepended.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        config: &GeneratorConfig,
        embed_dim: Option<usize>,
        num_timesteps: usize,
    ) -> Result<Self, ModelError> {
        if num_timesteps == 0 {
            return Err(ModelError::Config("diffusion needs at least one timestep".into()));
        }
        if let Some(spec) = &config.fusion {
            if spec.kind != FusionKind::Affine {
                return Err(ModelError::Config("diffusion text fusion must be affine".into()));
            }
        }
        let mut body_config = config.clone();
        body_config.in_channels = config.in_channels + config.out_channels;
        Ok(Self {
            body: UNet::build(store, rng, name, &body_config, embed_dim, true, false)?,
            image_channels: config.out_channels,
            num_timesteps,
        })
    }

    /// One timestep per batch element.
    pub fn forward(
        &self,
        g: &mut Graph,
        noisy: Var,
        mask: Var,
        timesteps: &[usize],
        emb: Option<Var>,
    ) -> Result<Var, ModelError> {
        let ns = g.shape(noisy).to_vec();
        let ms = g.shape(mask).to_vec();
        if ns.len() != 5 || ms.len() != 5 || ns[0] != ms[0] || ns[2..] != ms[2..] {
            return Err(ModelError::Shape(format!(
                "noisy image {ns:?} and mask {ms:?} are not aligned"
            )));
        }
        if ns[1] != self.image_channels {
            return Err(ModelError::Shape(format!(
                "noisy image must have {} channel(s), got {}",
                self.image_channels, ns[1]
            )));
        }
        if timesteps.len() != ns[0] {
            return Err(ModelError::Argument(format!(
                "{} timesteps for a batch of {}",
                timesteps.len(),
                ns[0]
            )));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t >= self.num_timesteps) {
            return Err(ModelError::Argument(format!(
                "timestep {t} outside [0, {})",
                self.num_timesteps
            )));
        }
        let x = g.concat_channels(&[noisy, mask]);
        self.body.forward(g, x, Some(timesteps), emb, None)
    }

    /// Predicted noise outside a training graph, same `t` for the whole batch.
    pub fn predict_noise(
        &self,
        store: &ParamStore,
        noisy: &FeatureMap,
        mask: &FeatureMap,
        timestep: usize,
        embedding: Option<&[TextEmbedding]>,
    ) -> Result<FeatureMap, ModelError> {
        let mut g = Graph::with_params(store);
        let n = g.input(noisy.to_dyn());
        let m = g.input(mask.to_dyn());
        let e = embedding.map(|e| embedding_batch(e).map(|a| g.input(a))).transpose()?;
        let ts = vec![timestep; noisy.shape()[0]];
        let y = self.forward(&mut g, n, m, &ts, e)?;
        FeatureMap::from_dyn(g.value(y).clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub downsamplings: usize,
}

impl DiscriminatorConfig {
    pub fn paper_scale() -> Self {
        Self {
            base_channels: 64,
            downsamplings: 3,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            base_channels: 8,
            downsamplings: 2,
        }
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::paper_scale()
    }
}

/// Conditional patch discriminator over `image ∥ mask`.
///
/// Each downsampling is a `4×4×4` stride-2 convolution; a final `3×3×3`
/// convolution maps to one score channel, so an input of side `n` yields a
/// score grid of side `n / 2^downsamplings`.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub config: DiscriminatorConfig,
    pub image_channels: usize,
    pub mask_channels: usize,
    first: Conv3d,
    blocks: Vec<ConvBlock>,
    head: Conv3d,
}

impl PatchDiscriminator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        config: &DiscriminatorConfig,
        image_channels: usize,
        mask_channels: usize,
    ) -> Result<Self, ModelError> {
        if config.downsamplings == 0 || config.base_channels == 0 {
            return Err(ModelError::Config(
                "discriminator needs positive base_channels and downsamplings".into(),
            ));
        }
        let ch = |i: usize| config.base_channels * (1usize << i).min(MAX_CHANNEL_MULT);
        let first = Conv3d::new(store, rng, &format!("{name}.d0"), image_channels + mask_channels, ch(0), 4, 2, 1);
        let blocks = (1..config.downsamplings)
            .map(|i| {
                ConvBlock::new(store, rng, &format!("{name}.d{i}"), ch(i - 1), ch(i), 4, 2, Activation::LeakyRelu(0.2))
            })
            .collect();
        let last = ch(config.downsamplings - 1);
        let head = Conv3d::new(store, rng, &format!("{name}.head"), last, 1, 3, 1, 1);
        Ok(Self {
            config: config.clone(),
            image_channels,
            mask_channels,
            first,
            blocks,
            head,
        })
    }

    /// Side length of the input region that influences one score.
    pub fn receptive_field(&self) -> usize {
        (0..self.config.downsamplings).fold(3, |r, _| (r - 1) * 2 + 4)
    }

    pub fn forward(&self, g: &mut Graph, image: Var, mask: Var) -> Result<Var, ModelError> {
        let is = g.shape(image).to_vec();
        let ms = g.shape(mask).to_vec();
        if is.len() != 5 || ms.len() != 5 || is[0] != ms[0] || is[2..] != ms[2..] {
            return Err(ModelError::Shape(format!(
                "image {is:?} and mask {ms:?} are not aligned"
            )));
        }
        if is[1] != self.image_channels || ms[1] != self.mask_channels {
            return Err(ModelError::Shape(format!(
                "expected {} image and {} mask channels, got {} and {}",
                self.image_channels, self.mask_channels, is[1], ms[1]
            )));
        }
        let f = 1usize << self.config.downsamplings;
        if is[2..].iter().any(|&d| d % f != 0) {
            return Err(ModelError::Shape(format!(
                "spatial dims {:?} not divisible by {f}",
                &is[2..]
            )));
        }
        let x = g.concat_channels(&[image, mask]);
        let h = self.first.forward(g, x);
        let mut h = g.leaky_relu(h, 0.2);
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        Ok(self.head.forward(g, h))
    }

    pub fn score(&self, store: &ParamStore, image: &FeatureMap, mask: &FeatureMap) -> Result<FeatureMap, ModelError> {
        let mut g = Graph::with_params(store);
        let i = g.input(image.to_dyn());
        let m = g.input(mask.to_dyn());
        let y = self.forward(&mut g, i, m)?;
        FeatureMap::from_dyn(g.value(y).clone())
    }
}
