//! Multimodal dialogue response generation with a non-hierarchical
//! attention encoder.
//!
//! Each utterance is encoded by parallel word-level streams (text
//! self-attention and text-to-image cross-attention) whose outputs are fused
//! by modality dropout and folded into a history matrix that is carried
//! from one utterance to the next, seeded by a trainable history parameter.
//! A standard Transformer decoder generates the textual response.

pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::{Gradients, Graph, Scalar, Tensor, Var};
