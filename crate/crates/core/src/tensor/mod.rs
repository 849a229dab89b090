//! Minimal reverse-mode autodiff over dense `f64` volumes.
//!
//! Supports exactly the operations the volumetric generators need:
//! cubic 3D convolutions, nearest upsampling, group normalization,
//! dense layers, per-channel and per-position broadcasts, and a spatial
//! softmax.

pub mod conv;
mod graph;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
