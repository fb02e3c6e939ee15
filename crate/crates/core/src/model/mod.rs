//! Minimal decoder-only transformer with full residual-stream exposure.
//!
//! `x_i^l = x_i^{l-1} + a_i^l + m_i^l`: no biases, no normalisation, so the
//! attention block output decomposes exactly into per-source-token terms.

mod config;
mod engine;
mod tokenizer;
mod trace;
mod weights;

pub use config::ModelConfig;
pub use engine::{FinishReason, ForwardOutput, GenerationResult, Model};
pub use tokenizer::{ByteTokenizer, TokenSequence, EOS_TOKEN};
pub use trace::{CaptureSpec, Positions, ResidualTrace};
pub use weights::{LayerWeights, ModelWeights, WEIGHTS_FORMAT_VERSION};
