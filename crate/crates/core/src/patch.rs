//! Capture and patched generation.
//!
//! A [`PatchPlan`] overwrites the post-block residual `x_p^l` of one prompt
//! position. Every later computation, including generated steps, reads the
//! patched stream.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptureSpec, ForwardOutput, GenerationResult, Model, ResidualTrace, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    /// Block output layer, `1..=L`.
    pub layer: usize,
    /// Prompt position.
    pub position: usize,
    pub replacement: Vec<f64>,
}

impl PatchPlan {
    pub fn new(layer: usize, position: usize, replacement: &Array1<f64>) -> Self {
        Self {
            layer,
            position,
            replacement: replacement.to_vec(),
        }
    }

    pub fn validate(&self, model: &Model, prompt_len: usize) -> Result<()> {
        let cfg = model.config();
        if self.layer == 0 || self.layer > cfg.num_layers {
            return Err(Error::Range(format!(
                "patch layer {} outside 1..={}",
                self.layer, cfg.num_layers
            )));
        }
        if self.position >= prompt_len {
            return Err(Error::Range(format!(
                "patch position {} beyond prompt of {prompt_len} tokens",
                self.position
            )));
        }
        if self.replacement.len() != cfg.model_dim {
            return Err(Error::Shape(format!(
                "replacement has dimension {}, expected {}",
                self.replacement.len(),
                cfg.model_dim
            )));
        }
        if self.replacement.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("replacement vector is not finite".into()));
        }
        Ok(())
    }
}

/// Record the coordinates selected by `spec`.
pub fn capture(model: &Model, tokens: &TokenSequence, spec: &CaptureSpec) -> Result<ResidualTrace> {
    Ok(model.forward(tokens, spec)?.trace)
}

/// Forward pass with `plan` applied.
pub fn patched_forward(
    model: &Model,
    tokens: &TokenSequence,
    plan: &PatchPlan,
    spec: &CaptureSpec,
) -> Result<ForwardOutput> {
    plan.validate(model, tokens.len())?;
    model.forward_patched(tokens, spec, Some(plan))
}

/// Greedy generation from `tokens` with `plan` applied to the prompt pass.
pub fn patched_generate(
    model: &Model,
    tokens: &TokenSequence,
    plan: &PatchPlan,
    max_steps: usize,
) -> Result<GenerationResult> {
    plan.validate(model, tokens.len())?;
    model.generate_inner(tokens, max_steps, Some(plan), false)
}
