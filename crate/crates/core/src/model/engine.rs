//! Forward pass and greedy decoding.
//!
//! Positions are processed one at a time against per-layer key/value
//! caches, so a full forward pass and incremental decoding share a single
//! code path and agree bit-for-bit.

use ndarray::{Array1, Array2, ArrayView1};

use super::tokenizer::EOS_TOKEN;
use super::{ByteTokenizer, CaptureSpec, ModelConfig, ModelWeights, ResidualTrace, TokenSequence};
use crate::error::{Error, Result};
use crate::patch::PatchPlan;

/// A decoder-only transformer with its tokenizer. Immutable and `Sync`.
#[derive(Debug, Clone)]
pub struct Model {
    weights: ModelWeights,
    tokenizer: ByteTokenizer,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `S x V`; row `i` is the unembedding of `x_i^L`.
    pub logits: Array2<f64>,
    pub trace: ResidualTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinishReason {
    EndOfSequence,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Generated ids, excluding the end-of-sequence token.
    pub output_tokens: Vec<usize>,
    pub output_text: String,
    /// `P x V`, present when requested.
    pub per_step_logits: Option<Array2<f64>>,
    pub finish: FinishReason,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Self {
        let tokenizer = ByteTokenizer::new(*weights.config());
        Self { weights, tokenizer }
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn tokenizer(&self) -> &ByteTokenizer {
        &self.tokenizer
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer.tokenize(text)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        self.tokenizer.detokenize(ids)
    }

    /// Wrap raw ids, validating them against this model.
    pub fn sequence(&self, ids: Vec<usize>) -> Result<TokenSequence> {
        TokenSequence::new(ids, self.config())
    }

    pub fn forward(&self, tokens: &TokenSequence, capture: &CaptureSpec) -> Result<ForwardOutput> {
        self.forward_patched(tokens, capture, None)
    }

    pub(crate) fn forward_patched(
        &self,
        tokens: &TokenSequence,
        capture: &CaptureSpec,
        patch: Option<&PatchPlan>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        capture.validate(self.config(), tokens.len())?;
        let mut state = DecodeState::new(self, patch);
        let mut rec = Recorder::new(capture, tokens.len(), self.config().num_heads);
        let mut logits = Array2::zeros((tokens.len(), self.config().vocab_size));
        for &id in tokens.ids() {
            let pos = state.len;
            let last = state.push(id, Some(&mut rec))?;
            logits.row_mut(pos).assign(&self.unembed(&last));
        }
        let mut trace = rec.finish();
        trace.patched = patch.map(|p| (p.layer, p.position));
        Ok(ForwardOutput { logits, trace })
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn generate(&self, tokens: &TokenSequence, max_steps: usize) -> Result<GenerationResult> {
        self.generate_inner(tokens, max_steps, None, false)
    }

    /// As [`generate`](Self::generate), also returning the logits of every step.
    pub fn generate_with_logits(&self, tokens: &TokenSequence, max_steps: usize) -> Result<GenerationResult> {
        self.generate_inner(tokens, max_steps, None, true)
    }

    pub(crate) fn generate_inner(
        &self,
        tokens: &TokenSequence,
        max_steps: usize,
        patch: Option<&PatchPlan>,
        record_logits: bool,
    ) -> Result<GenerationResult> {
        if max_steps == 0 {
            return Err(Error::Precondition("max_steps must be at least 1".into()));
        }
        self.check_tokens(tokens)?;
        let cfg = self.config();
        let mut state = DecodeState::new(self, patch);
        let mut last = None;
        for &id in tokens.ids() {
            last = Some(state.push(id, None)?);
        }
        let mut last = last.expect("token sequences are non-empty");
        let mut output = Vec::new();
        let mut step_logits: Vec<Array1<f64>> = Vec::new();
        let finish = loop {
            let logits = self.unembed(&last);
            let next = argmax_lowest(logits.view());
            if record_logits {
                step_logits.push(logits);
            }
            if next == EOS_TOKEN {
                break FinishReason::EndOfSequence;
            }
            output.push(next);
            if output.len() == max_steps {
                break FinishReason::MaxSteps;
            }
            if state.len == cfg.max_seq_len {
                return Err(Error::Length(format!(
                    "generation overflowed the context of {} tokens",
                    cfg.max_seq_len
                )));
            }
            last = state.push(next, None)?;
        };
        let per_step_logits = record_logits.then(|| {
            let mut m = Array2::zeros((step_logits.len(), cfg.vocab_size));
            for (i, row) in step_logits.iter().enumerate() {
                m.row_mut(i).assign(row);
            }
            m
        });
        Ok(GenerationResult {
            output_text: self.detokenize(&output),
            output_tokens: output,
            per_step_logits,
            finish,
        })
    }

    /// Argmax over the vocabulary of `hidden · unembedding`, lowest id on ties.
    pub fn unembed_argmax(&self, hidden: &Array1<f64>) -> Result<usize> {
        let d = self.config().model_dim;
        if hidden.len() != d {
            return Err(Error::Shape(format!(
                "hidden vector has dimension {}, expected {d}",
                hidden.len()
            )));
        }
        if hidden.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("hidden vector is not finite".into()));
        }
        Ok(argmax_lowest(self.unembed(hidden).view()))
    }

    fn unembed(&self, hidden: &Array1<f64>) -> Array1<f64> {
        hidden.dot(self.weights.unembedding())
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        // Sequences built against another config may not fit this model.
        TokenSequence::new(tokens.ids().to_vec(), self.config()).map(|_| ())
    }
}

pub(crate) fn argmax_lowest(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Running state of a left-to-right pass: per-layer, per-head key/value caches.
struct DecodeState<'m> {
    model: &'m Model,
    patch: Option<&'m PatchPlan>,
    /// `[layer - 1][head]`, one row per processed position.
    keys: Vec<Vec<Vec<Array1<f64>>>>,
    values: Vec<Vec<Vec<Array1<f64>>>>,
    len: usize,
    scale: f64,
}

impl<'m> DecodeState<'m> {
    fn new(model: &'m Model, patch: Option<&'m PatchPlan>) -> Self {
        let cfg = model.config();
        let empty = || vec![vec![Vec::new(); cfg.num_heads]; cfg.num_layers];
        Self {
            model,
            patch,
            keys: empty(),
            values: empty(),
            len: 0,
            scale: 1.0 / (cfg.head_dim as f64).sqrt(),
        }
    }

    /// Process one more position; returns its final residual `x^L`.
    fn push(&mut self, id: usize, mut rec: Option<&mut Recorder>) -> Result<Array1<f64>> {
        let cfg = *self.model.config();
        let pos = self.len;
        let mut x = self.model.weights.embedding().row(id).to_owned();
        check_finite(&x, 0, pos)?;
        if let Some(r) = rec.as_deref_mut() {
            r.hidden(0, pos, &x);
        }
        for l in 1..=cfg.num_layers {
            let w = &self.model.weights.layers()[l - 1];
            let mut attn = Array1::<f64>::zeros(cfg.model_dim);
            for h in 0..cfg.num_heads {
                let q = x.dot(&w.query[h]);
                self.keys[l - 1][h].push(x.dot(&w.key[h]));
                self.values[l - 1][h].push(x.dot(&w.value[h]));
                let keys = &self.keys[l - 1][h];
                let mut scores: Vec<f64> = keys.iter().map(|k| q.dot(k) * self.scale).collect();
                softmax_in_place(&mut scores);
                let mut head = Array1::<f64>::zeros(cfg.head_dim);
                for (p, v) in scores.iter().zip(&self.values[l - 1][h]) {
                    head.scaled_add(*p, v);
                }
                attn += &head.dot(&w.output[h]);
                if let Some(r) = rec.as_deref_mut() {
                    r.attention_row(l, h, pos, &scores);
                }
            }
            let mid = &x + &attn;
            let mlp = mid.dot(&w.mlp_in).mapv(gelu).dot(&w.mlp_out);
            let mut next = &mid + &mlp;
            check_finite(&next, l, pos)?;
            if let Some(plan) = self.patch {
                if plan.layer == l && plan.position == pos {
                    next = Array1::from(plan.replacement.clone());
                }
            }
            if let Some(r) = rec.as_deref_mut() {
                r.block(l, pos, &next, &attn, &mlp);
            }
            x = next;
        }
        self.len += 1;
        Ok(x)
    }
}

fn check_finite(x: &Array1<f64>, layer: usize, position: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer, position })
    }
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

struct Recorder<'s> {
    spec: &'s CaptureSpec,
    trace: ResidualTrace,
    seq_len: usize,
}

impl<'s> Recorder<'s> {
    fn new(spec: &'s CaptureSpec, seq_len: usize, num_heads: usize) -> Self {
        let mut trace = ResidualTrace {
            seq_len,
            ..Default::default()
        };
        for &l in spec.layers.iter().filter(|&&l| spec.wants_attention(l)) {
            for h in 0..num_heads {
                trace.attention.insert((l, h), Array2::zeros((seq_len, seq_len)));
            }
        }
        Self { spec, trace, seq_len }
    }

    fn hidden(&mut self, layer: usize, pos: usize, x: &Array1<f64>) {
        if self.spec.wants(layer, pos) {
            self.trace.hidden.insert((layer, pos), x.clone());
        }
    }

    fn block(&mut self, layer: usize, pos: usize, x: &Array1<f64>, a: &Array1<f64>, m: &Array1<f64>) {
        if self.spec.wants(layer, pos) {
            self.trace.hidden.insert((layer, pos), x.clone());
            self.trace.attn_out.insert((layer, pos), a.clone());
            self.trace.mlp_out.insert((layer, pos), m.clone());
        }
    }

    fn attention_row(&mut self, layer: usize, head: usize, pos: usize, weights: &[f64]) {
        if let Some(a) = self.trace.attention.get_mut(&(layer, head)) {
            debug_assert!(pos < self.seq_len);
            for (j, &w) in weights.iter().enumerate() {
                a[[pos, j]] = w;
            }
        }
    }

    fn finish(self) -> ResidualTrace {
        self.trace
    }
}
