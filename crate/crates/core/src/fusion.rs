//! Text-visual fusion units.
//!
//! * [`AffineFusion`]: per-channel scale and shift predicted from the text
//!   embedding, `γ(x')·e + θ(x')`, applied as the pair
//!   `fuse → 3D conv → fuse`. Both perceptrons start at `γ = 1`, `θ = 0` and
//!   the convolution starts at the identity, so a freshly built unit is the
//!   identity map.
//! * [`CrossAttentionFusion`]: the embedding is the only key. Queries and
//!   values come from `1×1×1` convolutions of the feature map; the softmax
//!   runs over flattened spatial positions and yields one weight per
//!   position, broadcast across channels and multiplied into the values.
//!   A residual connection adds the input back.

use ndarray::{Array5, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TextEmbedding;
use crate::nn::{Conv3d, Mlp, ModelError};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Rank-5 `(B, C, D, H, W)` feature volume with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array5<f64>);

impl FeatureMap {
    pub fn new(data: Array5<f64>) -> Result<Self, ModelError> {
        let s = data.shape();
        if s[1..].iter().any(|&d| d == 0) || s[0] == 0 {
            return Err(ModelError::Shape(format!("empty feature map {s:?}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("feature map".into()));
        }
        Ok(Self(data))
    }

    pub fn from_dyn(data: ArrayD<f64>) -> Result<Self, ModelError> {
        let d = data
            .into_dimensionality::<ndarray::Ix5>()
            .map_err(|e| ModelError::Shape(format!("feature map must be rank 5: {e}")))?;
        Self::new(d)
    }

    pub fn shape(&self) -> [usize; 5] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn data(&self) -> &Array5<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array5<f64> {
        self.0
    }

    pub fn to_dyn(&self) -> ArrayD<f64> {
        self.0.clone().into_dyn()
    }
}

/// Stack a batch of embeddings into a `[B, E]` array.
pub fn embedding_batch(embeddings: &[TextEmbedding]) -> Result<ArrayD<f64>, ModelError> {
    let Some(first) = embeddings.first() else {
        return Err(ModelError::Shape("empty embedding batch".into()));
    };
    let dim = first.dim();
    let mut data = Vec::with_capacity(embeddings.len() * dim);
    for e in embeddings {
        if e.dim() != dim {
            return Err(ModelError::Shape(format!(
                "mixed embedding dimensions {dim} and {}",
                e.dim()
            )));
        }
        data.extend(e.vector.iter().map(|&v| v as f64));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[embeddings.len(), dim]), data).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Affine,
    CrossAttention,
}

/// Where and how text fusion is inserted into a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub kind: FusionKind,
    /// Backbone resolution levels (0 = full resolution) that receive a unit.
    pub levels: Vec<usize>,
    /// Key width for cross-attention; defaults to the level's channel count.
    #[serde(default)]
    pub key_dim: Option<usize>,
    #[serde(default = "yes")]
    pub residual: bool,
    /// Hidden width of the affine perceptrons; defaults to the channel count.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
}

fn yes() -> bool {
    true
}

impl FusionSpec {
    pub fn affine(levels: Vec<usize>) -> Self {
        Self {
            kind: FusionKind::Affine,
            levels,
            key_dim: None,
            residual: true,
            hidden_dim: None,
        }
    }

    pub fn cross_attention(levels: Vec<usize>) -> Self {
        Self {
            kind: FusionKind::CrossAttention,
            ..Self::affine(levels)
        }
    }
}

fn check_inputs(
    g: &Graph,
    x: Var,
    emb: Var,
    channels: usize,
    embed_dim: usize,
) -> Result<(), ModelError> {
    let xs = g.shape(x);
    let es = g.shape(emb);
    if xs.len() != 5 {
        return Err(ModelError::Shape(format!("feature map must be rank 5, got {xs:?}")));
    }
    if xs[1] != channels {
        return Err(ModelError::Shape(format!(
            "channel mismatch: expected C={channels}, got C={}",
            xs[1]
        )));
    }
    if es.len() != 2 || es[1] != embed_dim {
        return Err(ModelError::Shape(format!(
            "embedding must be [B, {embed_dim}], got {es:?}"
        )));
    }
    if es[0] != xs[0] {
        return Err(ModelError::Shape(format!(
            "embedding batch {} does not match feature batch {}",
            es[0], xs[0]
        )));
    }
    Ok(())
}

/// One scale-and-shift application: `γ(x')·e + θ(x')`.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub mlp_gamma: Mlp,
    pub mlp_theta: Mlp,
}

impl AffineParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        embed_dim: usize,
        hidden: usize,
        channels: usize,
    ) -> Self {
        Self {
            mlp_gamma: Mlp::new(store, rng, &format!("{name}.gamma"), embed_dim, hidden, channels, 1.0),
            mlp_theta: Mlp::new(store, rng, &format!("{name}.theta"), embed_dim, hidden, channels, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, emb: Var) -> Var {
        let gamma = self.mlp_gamma.forward(g, emb);
        let theta = self.mlp_theta.forward(g, emb);
        let scaled = g.channel_mul(x, gamma);
        g.channel_add(scaled, theta)
    }
}

/// Affine fusion pair `fuse → conv → fuse` with independent perceptrons.
#[derive(Debug, Clone)]
pub struct AffineFusion {
    pub channels: usize,
    pub embed_dim: usize,
    pub first: AffineParams,
    pub conv: Conv3d,
    pub second: AffineParams,
}

impl AffineFusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        embed_dim: usize,
        hidden: Option<usize>,
    ) -> Self {
        let hidden = hidden.unwrap_or(channels.max(8));
        Self {
            channels,
            embed_dim,
            first: AffineParams::new(store, rng, &format!("{name}.aff1"), embed_dim, hidden, channels),
            conv: Conv3d::identity(store, &format!("{name}.conv"), channels, 3),
            second: AffineParams::new(store, rng, &format!("{name}.aff2"), embed_dim, hidden, channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, emb: Var) -> Result<Var, ModelError> {
        check_inputs(g, x, emb, self.channels, self.embed_dim)?;
        let h = self.first.forward(g, x, emb);
        let h = self.conv.forward(g, h);
        Ok(self.second.forward(g, h, emb))
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttentionFusion {
    pub channels: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub conv_q: Conv3d,
    /// `[key_dim, embed_dim]`, no bias.
    pub w_k: ParamId,
    pub conv_v: Conv3d,
    pub residual: bool,
}

impl CrossAttentionFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        embed_dim: usize,
        key_dim: Option<usize>,
        residual: bool,
    ) -> Self {
        let key_dim = key_dim.unwrap_or(channels);
        Self {
            channels,
            embed_dim,
            key_dim,
            conv_q: Conv3d::new(store, rng, &format!("{name}.q"), channels, key_dim, 1, 1, 0),
            w_k: store.uniform_fan_in(format!("{name}.k.weight"), &[key_dim, embed_dim], embed_dim, rng),
            conv_v: Conv3d::new(store, rng, &format!("{name}.v"), channels, channels, 1, 1, 0),
            residual,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.key_dim as f64).sqrt()
    }

    /// Output and the `[B, 1, D, H, W]` attention weights.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        x: Var,
        emb: Var,
    ) -> Result<(Var, Var), ModelError> {
        check_inputs(g, x, emb, self.channels, self.embed_dim)?;
        let q = self.conv_q.forward(g, x);
        let wk = g.param(self.w_k);
        let k = g.linear(emb, wk, None);
        let logits = g.channel_dot(q, k);
        let logits = g.scale(logits, self.scale());
        let weights = g.spatial_softmax(logits);
        let v = self.conv_v.forward(g, x);
        let mut out = g.spatial_mul(v, weights);
        if self.residual {
            out = g.add(out, x);
        }
        Ok((out, weights))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, emb: Var) -> Result<Var, ModelError> {
        self.forward_with_weights(g, x, emb).map(|(o, _)| o)
    }
}

#[derive(Debug, Clone)]
pub enum FusionLayer {
    Affine(AffineFusion),
    CrossAttention(CrossAttentionFusion),
}

impl FusionLayer {
    pub fn channels(&self) -> usize {
        match self {
            FusionLayer::Affine(a) => a.channels,
            FusionLayer::CrossAttention(c) => c.channels,
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionLayer::Affine(_) => FusionKind::Affine,
            FusionLayer::CrossAttention(_) => FusionKind::CrossAttention,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, emb: Var) -> Result<Var, ModelError> {
        match self {
            FusionLayer::Affine(a) => a.forward(g, x, emb),
            FusionLayer::CrossAttention(c) => c.forward(g, x, emb),
        }
    }
}

/// One independently parameterized unit per entry of `channels`.
pub fn make_fusion_stack<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    spec: &FusionSpec,
    channels: &[usize],
    embed_dim: usize,
) -> Result<Vec<FusionLayer>, ModelError> {
    if channels.is_empty() {
        return Err(ModelError::Config("fusion stack needs at least one level".into()));
    }
    if embed_dim == 0 {
        return Err(ModelError::Config("embedding dimension must be positive".into()));
    }
    if spec.key_dim == Some(0) {
        return Err(ModelError::Config("fusion key_dim must be positive".into()));
    }
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c == 0 {
                return Err(ModelError::Config(format!("level {i}: channel count must be positive")));
            }
            let n = format!("{name}.{i}");
            Ok(match spec.kind {
                FusionKind::Affine => FusionLayer::Affine(AffineFusion::new(
                    store,
                    rng,
                    &n,
                    c,
                    embed_dim,
                    spec.hidden_dim,
                )),
                FusionKind::CrossAttention => FusionLayer::CrossAttention(CrossAttentionFusion::new(
                    store,
                    rng,
                    &n,
                    c,
                    embed_dim,
                    spec.key_dim,
                    spec.residual,
                )),
            })
        })
        .collect()
}

fn run_unit(
    layer: &FusionLayer,
    store: &ParamStore,
    features: &FeatureMap,
    embeddings: &[TextEmbedding],
) -> Result<FeatureMap, ModelError> {
    let mut g = Graph::with_params(store);
    let x = g.input(features.to_dyn());
    let e = g.input(embedding_batch(embeddings)?);
    let y = layer.forward(&mut g, x, e)?;
    FeatureMap::from_dyn(g.value(y).clone())
}

/// Apply an affine fusion pair outside of any training graph.
pub fn affine_fuse(
    features: &FeatureMap,
    embeddings: &[TextEmbedding],
    layer: &AffineFusion,
    store: &ParamStore,
) -> Result<FeatureMap, ModelError> {
    run_unit(&FusionLayer::Affine(layer.clone()), store, features, embeddings)
}

/// Apply a cross-attention unit outside of any training graph.
pub fn cross_attention_fuse(
    features: &FeatureMap,
    embeddings: &[TextEmbedding],
    layer: &CrossAttentionFusion,
    store: &ParamStore,
) -> Result<FeatureMap, ModelError> {
    run_unit(&FusionLayer::CrossAttention(layer.clone()), store, features, embeddings)
}
