//! Multimodal emotion recognition in conversation.
//!
//! Per-utterance text, audio and visual feature vectors are turned into
//! emotion vectors (an attention encoder with a residual concat and a
//! five-layer mapping network per non-text modality, a mapping network alone
//! for text), fused with the sentence vector into an emotion capsule, and
//! classified in dialogue context by a bidirectional LSTM with an MLP head.

pub mod capsule;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod emoformer;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use capsule::{EmotionCapsule, Modality, ModalitySet};
pub use config::{ModelConfig, Preset, RunConfig, TrainConfig};
pub use data::{Dialogue, LabelSet, Utterance};
pub use error::{Error, ErrorKind, Result};
pub use metrics::EvalReport;
pub use model::EmoCaps;
pub use tensor::{Graph, ParamStore, Rng, Tensor, Var};
