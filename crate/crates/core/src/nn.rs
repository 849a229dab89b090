//! Parameterized layers built on [`crate::tensor`].

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Errors raised by network construction and forward passes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel * kernel;
        let weight = store.uniform_fan_in(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = Some(store.zeros(format!("{name}.bias"), &[out_ch]));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// Same-padded `k×k×k` convolution initialized to the identity map.
    pub fn identity(store: &mut ParamStore, name: &str, ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "identity conv needs an odd kernel");
        let mut w = ArrayD::zeros(IxDyn(&[ch, ch, kernel, kernel, kernel]));
        let c = kernel / 2;
        for i in 0..ch {
            w[[i, i, c, c, c].as_slice()] = 1.0;
        }
        let weight = store.add(format!("{name}.weight"), w);
        let bias = Some(store.zeros(format!("{name}.bias"), &[ch]));
        Self {
            weight,
            bias,
            in_ch: ch,
            out_ch: ch,
            kernel,
            stride: 1,
            pad: c,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.uniform_fan_in(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng);
        let bias = store.zeros(format!("{name}.bias"), &[out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.zeros(format!("{name}.weight"), &[out_dim, in_dim]);
        let bias = store.zeros(format!("{name}.bias"), &[out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.filled(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.zeros(format!("{name}.beta"), &[channels]),
            groups: default_groups(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups, self.eps)
    }
}

/// Largest group count `<= 8` dividing `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Two-layer perceptron `fc2(silu(fc1(x))) + offset`.
///
/// `fc2` is zero-initialized so the output starts at the constant `offset`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub offset: f64,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        offset: f64,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::zeros(store, &format!("{name}.fc2"), hidden, out_dim),
            offset,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.silu(h);
        let y = self.fc2.forward(g, h);
        if self.offset == 0.0 {
            y
        } else {
            g.add_scalar(y, self.offset)
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }
}

/// Conv → GroupNorm → activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: GroupNorm,
    pub act: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Silu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Silu => g.silu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
    ) -> Self {
        let pad = if stride == 1 { kernel / 2 } else { (kernel - stride).div_ceil(2) };
        Self {
            conv: Conv3d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, pad),
            norm: GroupNorm::new(store, &format!("{name}.norm"), out_ch),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv.forward(g, x);
        let h = self.norm.forward(g, h);
        self.act.apply(g, h)
    }
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> ArrayD<f64> {
    let half = dim / 2;
    let mut out = ArrayD::zeros(IxDyn(&[timesteps.len(), dim]));
    for (b, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[[b, i].as_slice()] = a.sin();
            out[[b, half + i].as_slice()] = a.cos();
        }
    }
    out
}
