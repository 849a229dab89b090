//! Mask- and clinical-text-conditioned synthesis of 3-D CT volumes: tabular
//! records rendered to text, text embeddings, fusion units, U-Net / pix2pix /
//! diffusion backbones, training, patch-wise metrics and counterfactual analysis.

pub mod nn;
pub mod tensor;
pub mod tabular;
pub mod embedding;
pub mod fusion;
pub mod backbones;
pub mod diffusion;
pub mod data;
pub mod checkpoint;
pub mod model;
pub mod training;
pub mod evaluation;
pub mod analysis;

pub use analysis::{AnalysisOptions, CounterfactualSpec};
pub use data::{CropSpec, IntensityWindow, PhantomConfig, VolumeSample};
pub use embedding::{EncoderHandle, TextEmbedding};
pub use evaluation::{EvalProtocol, MetricReport};
pub use fusion::{FeatureMap, FusionSpec};
pub use model::{ModelMeta, SynthesisModel};
pub use tabular::{ClinicalRecord, Schema, TextDescription};
pub use training::{Backbone, TrainConfig, TrainOptions};
