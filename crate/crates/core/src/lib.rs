//! Spoken dialogue state tracking with a speech encoder, a connector producing soft prompts,
//! and a LoRA-adapted causal language model.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod connector;
pub mod data;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod json;
pub mod lm;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod postprocess;
pub mod prompting;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model used by the command-line tools.
pub type Model = model::SpeechDstModel<f32>;
pub type Lm = lm::AdaptedLm<f32>;
pub type Connector = connector::Connector<f32>;
pub type Encoder = encoder::SpeechEncoder<f32>;
pub type Tensor = tensor::Matrix<f32>;
