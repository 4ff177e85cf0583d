//! Mixture-of-quantization item tokenizer.
//!
//! Items carrying text, vision and behavior embeddings are encoded by shared
//! and modality-specific experts, quantized against per-expert cosine
//! codebooks and emitted as Semantic-ID sequences. Behavior experts are
//! gated by a router whose density tracks the item's behavior norm.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common instantiations.

pub mod align;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod quantize;
pub mod router;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DatasetF64 = data::Dataset<f64>;
pub type DatasetF32 = data::Dataset<f32>;
pub type ModelF64 = model::MixQuantModel<f64>;
pub type ModelF32 = model::MixQuantModel<f32>;
pub type TensorF64 = numerics::Tensor<f64>;
pub type TensorF32 = numerics::Tensor<f32>;
pub type TrainerF64 = train::Trainer<f64>;
pub type TrainerF32 = train::Trainer<f32>;
