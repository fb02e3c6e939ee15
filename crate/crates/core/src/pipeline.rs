//! The three-stage probe: inference, scoping-in, filtering.
//!
//! 1. The model answers an open-ended question. The hidden states of the
//!    answer tokens at layer `l` are summed, weight 1 for noun/verb tokens
//!    and 0 otherwise, into a condensed vector `x_*^l` (no normalisation).
//! 2. `x_*^l` overwrites the residual at the final placeholder token of an
//!    inspection prompt at layer `l`; the continuation is parsed into
//!    candidate knowledge strings.
//! 3. Candidates are kept when their activation score against the input
//!    text clears the filter threshold.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{EmbedderConfig, ItemOrigin, KnowledgeFilter, KnowledgeItem, DEFAULT_THRESHOLD};
use crate::harness::prompts::{render_prompt, PromptContext, PromptScheme, PromptTask, SchemeKind, TemplateKind};
use crate::model::{CaptureSpec, Model, Positions, ResidualTrace};
use crate::patch::{patched_generate, PatchPlan};

/// An open-ended cultural question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    /// The question, or for extractive items the passage to extract from.
    #[serde(alias = "text")]
    pub question: String,
    pub country: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub domain: String,
    /// Present for extractive items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
}

impl QAInstance {
    pub fn validate(&self) -> Result<()> {
        if self.answers.iter().all(|a| a.trim().is_empty()) {
            return Err(Error::Data(format!("instance {} has no gold answer", self.id)));
        }
        if self.question.trim().is_empty() {
            return Err(Error::Data(format!("instance {} has an empty question", self.id)));
        }
        Ok(())
    }

    pub fn template(&self) -> TemplateKind {
        if self.entity_type.is_some() {
            TemplateKind::ExtractiveQa
        } else {
            TemplateKind::CommonsenseQa
        }
    }

    pub fn task(&self) -> PromptTask<'_> {
        match &self.entity_type {
            Some(entity_type) => PromptTask::Extract {
                text: &self.question,
                entity_type,
            },
            None => PromptTask::Question(&self.question),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Noun,
    Verb,
    Other,
}

/// Assigns a coarse word class to a single word.
pub trait PosTagger: Send + Sync {
    fn tag(&self, word: &str) -> WordClass;
}

/// Closed-class stoplist tagger: function words are `Other`; any other word
/// starting with a letter counts as a noun/verb.
#[derive(Debug, Clone, Default)]
pub struct StoplistTagger;

const CLOSED_CLASS: &[&str] = &[
    // determiners
    "a",
    "an",
    "the",
    "this",
    "that",
    "these",
    "those",
    "some",
    "any",
    "each",
    "every",
    "no",
    "all",
    "both",
    "either",
    "neither",
    "such",
    "what",
    "which",
    "whose",
    // prepositions
    "of",
    "in",
    "on",
    "at",
    "by",
    "for",
    "with",
    "about",
    "against",
    "between",
    "into",
    "through",
    "during",
    "before",
    "after",
    "above",
    "below",
    "to",
    "from",
    "up",
    "down",
    "out",
    "off",
    "over",
    "under",
    "as",
    "like",
    "near",
    "per",
    "via",
    "upon",
    "within",
    "without",
    "among",
    "across",
    "around",
    "behind",
    "beyond",
    // conjunctions
    "and",
    "or",
    "but",
    "nor",
    "so",
    "yet",
    "if",
    "because",
    "while",
    "although",
    "though",
    "unless",
    "whether",
    "than",
    "then",
    // pronouns
    "i",
    "me",
    "my",
    "mine",
    "you",
    "your",
    "yours",
    "he",
    "him",
    "his",
    "she",
    "her",
    "hers",
    "it",
    "its",
    "we",
    "us",
    "our",
    "ours",
    "they",
    "them",
    "their",
    "theirs",
    "who",
    "whom",
    "myself",
    "yourself",
    "itself",
    "themselves",
    "one",
    // auxiliaries and modals
    "is",
    "am",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "do",
    "does",
    "did",
    "have",
    "has",
    "had",
    "will",
    "would",
    "shall",
    "should",
    "can",
    "could",
    "may",
    "might",
    "must",
    // particles and adverbs that never carry content here
    "not",
    "very",
    "too",
    "also",
    "just",
    "only",
    "there",
    "here",
];

impl PosTagger for StoplistTagger {
    fn tag(&self, word: &str) -> WordClass {
        let lower = word.to_lowercase();
        if CLOSED_CLASS.contains(&lower.as_str()) {
            return WordClass::Other;
        }
        match lower.chars().next() {
            Some(c) if c.is_alphabetic() => WordClass::Noun,
            _ => WordClass::Other,
        }
    }
}

/// Per-answer-token weights, each 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenWeightMask {
    weights: Vec<u8>,
}

impl TokenWeightMask {
    pub fn new(weights: Vec<u8>) -> Result<Self> {
        if weights.iter().any(|&w| w > 1) {
            return Err(Error::Precondition("mask weights must be 0 or 1".into()));
        }
        Ok(Self { weights })
    }

    pub fn zeros(len: usize) -> Self {
        Self { weights: vec![0; len] }
    }

    pub fn one_hot(len: usize, at: usize) -> Self {
        let mut weights = vec![0; len];
        weights[at] = 1;
        Self { weights }
    }

    pub fn weights(&self) -> &[u8] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight_sum(&self) -> usize {
        self.weights.iter().map(|&w| w as usize).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.weight_sum() == 0
    }

    /// Union of two masks with disjoint support.
    pub fn disjoint_union(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Shape("masks differ in length".into()));
        }
        if self.weights.iter().zip(&other.weights).any(|(a, b)| a & b == 1) {
            return Err(Error::Precondition("masks overlap".into()));
        }
        Ok(Self {
            weights: self.weights.iter().zip(&other.weights).map(|(a, b)| a | b).collect(),
        })
    }

    /// Clear the first `n` weights.
    pub fn clear_prefix(&mut self, n: usize) {
        let n = n.min(self.weights.len());
        self.weights[..n].fill(0);
    }
}

/// Mark tokens belonging to noun/verb words. Works on the byte tokens of
/// `model`: a word is a maximal run of non-whitespace bytes with leading and
/// trailing punctuation stripped; punctuation and whitespace get weight 0.
pub fn pos_weight_mask(model: &Model, answer_tokens: &[usize], tagger: &dyn PosTagger) -> TokenWeightMask {
    let bytes: Vec<Option<u8>> = answer_tokens
        .iter()
        .map(|&id| {
            let s = model.detokenize(&[id]);
            // Single bytes that are not valid UTF-8 on their own decode to U+FFFD.
            if s.len() == 1 {
                s.bytes().next()
            } else {
                id.checked_sub(1).and_then(|b| u8::try_from(b).ok())
            }
        })
        .collect();
    let mut weights = vec![0u8; answer_tokens.len()];
    let is_space = |b: &Option<u8>| b.is_none_or(|b| b.is_ascii_whitespace());
    let mut i = 0;
    while i < bytes.len() {
        if is_space(&bytes[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !is_space(&bytes[i]) {
            i += 1;
        }
        let mut lo = start;
        let mut hi = i;
        while lo < hi && bytes[lo].is_some_and(|b| b.is_ascii_punctuation()) {
            lo += 1;
        }
        while hi > lo && bytes[hi - 1].is_some_and(|b| b.is_ascii_punctuation()) {
            hi -= 1;
        }
        if lo == hi {
            continue;
        }
        let word: Vec<u8> = bytes[lo..hi].iter().map(|b| b.unwrap_or(b' ')).collect();
        let word = String::from_utf8_lossy(&word);
        if matches!(tagger.tag(&word), WordClass::Noun | WordClass::Verb) {
            weights[lo..hi].fill(1);
        }
    }
    TokenWeightMask { weights }
}

/// The weighted sum `x_*^l` of answer hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedRepresentation {
    pub vector: Vec<f64>,
    pub layer: usize,
    pub source_instance: String,
    /// Number of answer tokens that contributed.
    pub weight_sum: usize,
}

/// `x_*^l = sum_p w_p x_p^l` over answer tokens, which occupy positions
/// `answer_start..answer_start + mask.len()` of `trace`.
pub fn condense(
    trace: &ResidualTrace,
    mask: &TokenWeightMask,
    layer: usize,
    answer_start: usize,
    source_instance: &str,
) -> Result<CondensedRepresentation> {
    let mut sum: Option<Array1<f64>> = None;
    let mut dim = None;
    for (k, &w) in mask.weights().iter().enumerate() {
        let x = trace.hidden.get(&(layer, answer_start + k)).ok_or_else(|| {
            Error::Shape(format!(
                "mask position {k} has no layer-{layer} state at position {}",
                answer_start + k
            ))
        })?;
        dim = Some(x.len());
        if w == 1 {
            match sum.as_mut() {
                Some(acc) => *acc += x,
                None => sum = Some(x.clone()),
            }
        }
    }
    let vector = match (sum, dim) {
        (Some(v), _) => v.to_vec(),
        (None, Some(d)) => vec![0.0; d],
        (None, None) => {
            return Err(Error::Shape("cannot condense an empty answer".into()));
        }
    };
    Ok(CondensedRepresentation {
        vector,
        layer,
        source_instance: source_instance.to_string(),
        weight_sum: mask.weight_sum(),
    })
}

pub const PLACEHOLDER: &str = "x";

/// Few-shot association prompt ending in the placeholder token.
pub const DEFAULT_INSPECTION_PROMPT: &str = "Generate associated words, Syria, Oman, Jordan, Qatar, West Asia, Turkey, Israel, Lebanon, Leonardo DiCaprio, Tom Cruise, Kate Winslet, Brad Pitt, Actor, Samsung, Cell Phone, TV, Apple, Nokia, South Korea, Electronics, x";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InspectionPrompt {
    text: String,
    placeholder_position: usize,
}

impl InspectionPrompt {
    /// Trailing whitespace is dropped; the remaining text must end in a
    /// standalone placeholder `x`.
    pub fn new(text: &str, model: &Model) -> Result<Self> {
        let text = text.trim_end();
        let body = text
            .strip_suffix(PLACEHOLDER)
            .ok_or_else(|| Error::Config("inspection prompt must end with the placeholder `x`".into()))?;
        if body.chars().last().is_some_and(|c| c.is_alphanumeric()) {
            return Err(Error::Config(
                "the placeholder `x` must be a separate word at the end of the prompt".into(),
            ));
        }
        let tokens = model.tokenize(text)?;
        let placeholder_position = tokens.len() - 1;
        if model.detokenize(&tokens.ids()[placeholder_position..]) != PLACEHOLDER {
            return Err(Error::Config("placeholder does not map to a single token".into()));
        }
        Ok(Self {
            text: text.to_string(),
            placeholder_position,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn placeholder_position(&self) -> usize {
        self.placeholder_position
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawKnowledgeOutput {
    pub instance_id: String,
    pub layer: usize,
    pub text: String,
    pub parsed: Vec<String>,
}

const MAX_ITEM_WORDS: usize = 8;

/// Split on commas and newlines, trim, lowercase, drop empty and over-long
/// items; stop at the first repeat.
pub fn parse_knowledge(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for raw in text.split([',', '\n']) {
        let item = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if item.is_empty() || item.split(' ').count() > MAX_ITEM_WORDS {
            continue;
        }
        if !seen.insert(item.clone()) {
            break;
        }
        out.push(item);
    }
    out
}

/// Patch `x_*` into the placeholder of the inspection prompt at its layer and decode.
pub fn scope_in(
    model: &Model,
    condensed: &CondensedRepresentation,
    prompt: &InspectionPrompt,
    max_steps: usize,
) -> Result<RawKnowledgeOutput> {
    let tokens = model.tokenize(prompt.text())?;
    let plan = PatchPlan {
        layer: condensed.layer,
        position: prompt.placeholder_position(),
        replacement: condensed.vector.clone(),
    };
    let out = patched_generate(model, &tokens, &plan, max_steps)?;
    Ok(RawKnowledgeOutput {
        instance_id: condensed.source_instance.clone(),
        layer: condensed.layer,
        parsed: parse_knowledge(&out.output_text),
        text: out.output_text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Layers to probe; `None` means `{ceil(L / 2)}`.
    pub layers: Option<Vec<usize>>,
    /// Generation budget for the answer.
    pub max_steps: usize,
    /// Generation budget for the inspection continuation.
    pub inspect_max_steps: usize,
    pub threshold: f64,
    pub embedder: EmbedderConfig,
    /// Inspection prompt text; `None` uses the built-in prompt.
    pub inspection_prompt: Option<String>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            layers: None,
            max_steps: 16,
            inspect_max_steps: 24,
            threshold: DEFAULT_THRESHOLD,
            embedder: EmbedderConfig::default(),
            inspection_prompt: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn resolved_layers(&self, num_layers: usize) -> Result<Vec<usize>> {
        let layers = match &self.layers {
            Some(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
            None => vec![num_layers.div_ceil(2)],
        };
        if layers.is_empty() {
            return Err(Error::Config("pipeline layer set is empty".into()));
        }
        if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > num_layers) {
            return Err(Error::Range(format!("pipeline layer {bad} outside 1..={num_layers}")));
        }
        Ok(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagReason {
    /// The model produced no answer tokens.
    EmptyAnswer,
    /// No answer token was tagged noun or verb, so `x_*` would be zero.
    NoCondensableContent,
    /// Processing failed; see the message.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFlag {
    pub instance_id: String,
    pub country: String,
    pub reason: FlagReason,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub message: String,
}

/// One (instance, layer) probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub instance_id: String,
    pub country: String,
    pub layer: usize,
    pub answer_text: String,
    pub mask_weight_sum: usize,
    pub inspection_output: String,
    pub candidates: Vec<String>,
    pub items: Vec<KnowledgeItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    /// Sorted by instance id, then layer.
    pub records: Vec<PipelineRecord>,
    pub flags: Vec<InstanceFlag>,
}

impl PipelineOutput {
    pub fn items(&self) -> impl Iterator<Item = &KnowledgeItem> {
        self.records.iter().flat_map(|r| r.items.iter())
    }
}

/// A configured probe over one model.
pub struct Pipeline<'m> {
    model: &'m Model,
    layers: Vec<usize>,
    max_steps: usize,
    inspect_max_steps: usize,
    prompt: InspectionPrompt,
    filter: KnowledgeFilter,
    tagger: Arc<dyn PosTagger>,
}

enum Outcome {
    Records(Vec<PipelineRecord>),
    Flag(InstanceFlag),
}

const ANSWER_PREFIX: &str = "answer:";

impl<'m> Pipeline<'m> {
    pub fn new(model: &'m Model, config: &PipelineConfig) -> Result<Self> {
        if config.max_steps == 0 || config.inspect_max_steps == 0 {
            return Err(Error::Config("generation budgets must be at least 1".into()));
        }
        let layers = config.resolved_layers(model.config().num_layers)?;
        let prompt = InspectionPrompt::new(
            config.inspection_prompt.as_deref().unwrap_or(DEFAULT_INSPECTION_PROMPT),
            model,
        )?;
        let filter = KnowledgeFilter::new(config.embedder.build()?, config.threshold)?;
        Ok(Self {
            model,
            layers,
            max_steps: config.max_steps,
            inspect_max_steps: config.inspect_max_steps,
            prompt,
            filter,
            tagger: Arc::new(StoplistTagger),
        })
    }

    pub fn with_tagger(mut self, tagger: Arc<dyn PosTagger>) -> Self {
        self.tagger = tagger;
        self
    }

    pub fn with_filter(mut self, filter: KnowledgeFilter) -> Self {
        self.filter = filter;
        self
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// The Step 1 input text: the baseline prompt for the instance.
    pub fn input_text(&self, instance: &QAInstance) -> Result<String> {
        let scheme = PromptScheme {
            kind: SchemeKind::Baseline,
            template: instance.template(),
        };
        Ok(render_prompt(&scheme, instance.task(), PromptContext::default())?.text)
    }

    pub fn run(&self, instances: &[QAInstance]) -> PipelineOutput {
        let mut outcomes: Vec<(String, Outcome)> = instances
            .par_iter()
            .map(|inst| {
                let outcome = match self.process(inst) {
                    Ok(o) => o,
                    Err(e) => {
                        tracing::warn!(instance = %inst.id, error = %e, "pipeline instance failed");
                        Outcome::Flag(InstanceFlag {
                            instance_id: inst.id.clone(),
                            country: inst.country.clone(),
                            reason: FlagReason::Failed,
                            message: e.to_string(),
                        })
                    }
                };
                (inst.id.clone(), outcome)
            })
            .collect();
        outcomes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = PipelineOutput::default();
        for (_, outcome) in outcomes {
            match outcome {
                Outcome::Records(r) => out.records.extend(r),
                Outcome::Flag(f) => out.flags.push(f),
            }
        }
        out
    }

    fn process(&self, inst: &QAInstance) -> Result<Outcome> {
        inst.validate()?;
        let flag = |reason| {
            Outcome::Flag(InstanceFlag {
                instance_id: inst.id.clone(),
                country: inst.country.clone(),
                reason,
                message: String::new(),
            })
        };
        let input_text = self.input_text(inst)?;
        let prompt = self.model.tokenize(&input_text)?;
        let answer = self.model.generate(&prompt, self.max_steps)?;
        if answer.output_tokens.is_empty() {
            return Ok(flag(FlagReason::EmptyAnswer));
        }
        let mut mask = pos_weight_mask(self.model, &answer.output_tokens, self.tagger.as_ref());
        mask.clear_prefix(answer_prefix_len(&answer.output_text, &answer.output_tokens));
        if mask.is_all_zero() {
            return Ok(flag(FlagReason::NoCondensableContent));
        }

        let full = prompt.concat(&answer.output_tokens, self.model.config())?;
        let answer_start = prompt.len();
        let spec = CaptureSpec::layers_at(
            self.layers.iter().copied(),
            Positions::Set((answer_start..full.len()).collect()),
        );
        let trace = self.model.forward(&full, &spec)?.trace;
        let origin_for = |layer| ItemOrigin {
            country: inst.country.clone(),
            instance_id: inst.id.clone(),
            layer,
        };

        let mut records = Vec::with_capacity(self.layers.len());
        for &layer in &self.layers {
            let condensed = condense(&trace, &mask, layer, answer_start, &inst.id)?;
            let raw = scope_in(self.model, &condensed, &self.prompt, self.inspect_max_steps)?;
            let items = self.filter.filter(&raw.parsed, &input_text, &origin_for(layer))?;
            records.push(PipelineRecord {
                instance_id: inst.id.clone(),
                country: inst.country.clone(),
                layer,
                answer_text: answer.output_text.clone(),
                mask_weight_sum: condensed.weight_sum,
                inspection_output: raw.text,
                candidates: raw.parsed,
                items,
            });
        }
        Ok(Outcome::Records(records))
    }
}

/// Number of leading answer tokens spent on the `Answer:` label the prompt asks for.
fn answer_prefix_len(text: &str, tokens: &[usize]) -> usize {
    let trimmed = text.trim_start();
    let lead = text.len() - trimmed.len();
    if trimmed.len() >= ANSWER_PREFIX.len()
        && trimmed.is_char_boundary(ANSWER_PREFIX.len())
        && trimmed[..ANSWER_PREFIX.len()].eq_ignore_ascii_case(ANSWER_PREFIX)
        && text.len() == tokens.len()
    {
        lead + ANSWER_PREFIX.len()
    } else {
        0
    }
}

/// Run the probe over `instances` with the default tagger.
pub fn run_pipeline(model: &Model, instances: &[QAInstance], config: &PipelineConfig) -> Result<PipelineOutput> {
    Ok(Pipeline::new(model, config)?.run(instances))
}
