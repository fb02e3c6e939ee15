//! Scoring model outputs: exact match, MCQ letter parsing, refusals and metrics.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompts::{
    render_prompt, PromptContext, PromptScheme, PromptTask, SchemeKind, TemplateKind, OPTION_LETTERS,
};
use crate::attention::Grouping;
use crate::error::{Error, Result};
use crate::mcq::{CountryTable, LabelKind, McqInstance};
use crate::model::Model;
use crate::pipeline::QAInstance;

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

const ANSWER_TAG: &str = "answer:";

/// Whether `output` contains any gold (case- and whitespace-insensitive).
/// With `strict`, the output minus a leading `Answer:` and trailing
/// punctuation must equal a gold.
pub fn exact_match(output: &str, golds: &[String], strict: bool) -> bool {
    let out = normalize(output);
    let golds = golds.iter().map(|g| normalize(g)).filter(|g| !g.is_empty());
    if strict {
        let body = out.strip_prefix(ANSWER_TAG).unwrap_or(&out).trim();
        let body = body.trim_end_matches(|c: char| c.is_ascii_punctuation()).trim();
        golds.into_iter().any(|g| g == body)
    } else {
        golds.into_iter().any(|g| out.contains(&g))
    }
}

/// Phrases marking a declined answer, matched on the normalised output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RefusalLexicon(pub Vec<String>);

impl Default for RefusalLexicon {
    fn default() -> Self {
        Self(
            ["i don't know", "cannot", "unable to", "not sure", ""]
                .map(String::from)
                .to_vec(),
        )
    }
}

impl RefusalLexicon {
    /// The matching phrase, if any. The empty phrase matches only empty output.
    pub fn matches(&self, output: &str) -> Option<RefusalReason> {
        let out = normalize(output).replace('\u{2019}', "'");
        for phrase in &self.0 {
            let p = normalize(phrase);
            if p.is_empty() {
                if out.is_empty() {
                    return Some(RefusalReason::Empty);
                }
            } else if out.contains(&p) {
                return Some(RefusalReason::Phrase);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefusalReason {
    Phrase,
    Empty,
    Unparsable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum McqChoice {
    Option { index: usize },
    Refusal { reason: RefusalReason },
}

impl McqChoice {
    pub fn index(&self) -> Option<usize> {
        match self {
            McqChoice::Option { index } => Some(*index),
            McqChoice::Refusal { .. } => None,
        }
    }
}

fn letter_index(c: char) -> Option<usize> {
    OPTION_LETTERS.iter().position(|&l| l == c.to_ascii_uppercase())
}

fn letter_after_tag(output: &str) -> Option<usize> {
    let at = output.to_ascii_lowercase().rfind(ANSWER_TAG)?;
    let rest = output[at + ANSWER_TAG.len()..].trim_start();
    let rest = rest.trim_start_matches(['[', '(', '*']);
    let mut chars = rest.chars();
    let idx = letter_index(chars.next()?)?;
    match chars.next() {
        Some(c) if c.is_alphanumeric() => None,
        _ => Some(idx),
    }
}

/// A single distinct capital letter A-D standing alone somewhere in the output.
fn standalone_letter(output: &str) -> Option<usize> {
    let chars: Vec<char> = output.chars().collect();
    let mut found = HashSet::new();
    for (i, &c) in chars.iter().enumerate() {
        if !OPTION_LETTERS.contains(&c) {
            continue;
        }
        let before = i.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i + 1).copied();
        let alone = |n: Option<char>| n.is_none_or(|n| !n.is_alphanumeric() && n != '\'');
        if alone(before) && alone(after) {
            found.insert(c);
        }
    }
    match found.len() {
        1 => letter_index(*found.iter().next().expect("one letter")),
        _ => None,
    }
}

fn unique_option_text(output: &str, options: &[String]) -> Option<usize> {
    let out = normalize(output);
    let hits: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            let o = normalize(o);
            !o.is_empty() && out.contains(&o)
        })
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

/// Letter after `Answer:`, then a lone letter, then a unique option text;
/// otherwise a refusal (lexicon phrase, empty, or unparsable).
pub fn parse_mcq_choice(output: &str, options: &[String], lexicon: &RefusalLexicon) -> McqChoice {
    let n = options.len();
    let valid = |i: usize| (i < n).then_some(McqChoice::Option { index: i });
    if let Some(c) = letter_after_tag(output).and_then(valid) {
        return c;
    }
    if let Some(c) = standalone_letter(output).and_then(valid) {
        return c;
    }
    if let Some(i) = unique_option_text(output, options) {
        return McqChoice::Option { index: i };
    }
    McqChoice::Refusal {
        reason: lexicon.matches(output).unwrap_or(RefusalReason::Unparsable),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub scheme: SchemeKind,
    pub prompt: String,
    pub output: String,
    pub matched: bool,
    pub refusal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_reason: Option<RefusalReason>,
    /// MCQ only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub max_steps: usize,
    pub strict_match: bool,
    pub refusal_lexicon: RefusalLexicon,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            max_steps: 16,
            strict_match: false,
            refusal_lexicon: RefusalLexicon::default(),
        }
    }
}

/// Concept lists keyed by country code, for the knowledge-augmented scheme.
pub type KnowledgeLists = BTreeMap<String, Vec<String>>;

fn country_name(table: &CountryTable, code: &str) -> String {
    table
        .get(code)
        .map(|e| e.name.clone())
        .unwrap_or_else(|| code.to_string())
}

/// Evaluation of one scheme; instances that cannot be prompted are listed in `skipped`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    pub skipped: Vec<String>,
}

pub fn evaluate_open(
    model: &Model,
    instances: &[QAInstance],
    kind: SchemeKind,
    table: &CountryTable,
    knowledge: &KnowledgeLists,
    settings: &EvalSettings,
) -> Result<EvalRun> {
    let outcomes: Vec<Result<Option<EvalRecord>>> = instances
        .par_iter()
        .map(|inst| {
            let scheme = PromptScheme {
                kind,
                template: inst.template(),
            };
            let name = country_name(table, &inst.country);
            let ctx = PromptContext {
                country: Some(&name),
                knowledge: knowledge.get(&inst.country).map(Vec::as_slice),
            };
            let prompt = match render_prompt(&scheme, inst.task(), ctx) {
                Ok(p) => p.text,
                Err(Error::Config(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let out = model.generate(&model.tokenize(&prompt)?, settings.max_steps)?;
            let matched = exact_match(&out.output_text, &inst.answers, settings.strict_match);
            let refusal_reason = if matched {
                None
            } else {
                settings.refusal_lexicon.matches(&out.output_text)
            };
            Ok(Some(EvalRecord {
                instance_id: inst.id.clone(),
                scheme: kind,
                prompt,
                output: out.output_text,
                matched,
                refusal: refusal_reason.is_some(),
                refusal_reason,
                chosen: None,
            }))
        })
        .collect();
    let mut run = EvalRun::default();
    for (inst, o) in instances.iter().zip(outcomes) {
        match o? {
            Some(r) => run.records.push(r),
            None => run.skipped.push(inst.id.clone()),
        }
    }
    Ok(run)
}

/// Render the MCQ prompt of an instance under a scheme.
pub fn mcq_prompt(
    instance: &McqInstance,
    kind: SchemeKind,
    table: &CountryTable,
    knowledge: &KnowledgeLists,
) -> Result<super::prompts::RenderedPrompt> {
    let name = country_name(table, &instance.country);
    render_prompt(
        &PromptScheme {
            kind,
            template: TemplateKind::CommonsenseQa,
        },
        PromptTask::MultipleChoice {
            question: &instance.question,
            options: &instance.options,
        },
        PromptContext {
            country: Some(&name),
            knowledge: knowledge.get(&instance.country).map(Vec::as_slice),
        },
    )
}

pub fn evaluate_mcq(
    model: &Model,
    dataset: &[McqInstance],
    kind: SchemeKind,
    table: &CountryTable,
    knowledge: &KnowledgeLists,
    settings: &EvalSettings,
) -> Result<EvalRun> {
    let outcomes: Vec<Result<Option<EvalRecord>>> = dataset
        .par_iter()
        .map(|inst| {
            let prompt = match mcq_prompt(inst, kind, table, knowledge) {
                Ok(p) => p.text,
                Err(Error::Config(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let out = model.generate(&model.tokenize(&prompt)?, settings.max_steps)?;
            let choice = parse_mcq_choice(&out.output_text, &inst.options, &settings.refusal_lexicon);
            let refusal_reason = match choice {
                McqChoice::Refusal { reason } => Some(reason),
                McqChoice::Option { .. } => None,
            };
            Ok(Some(EvalRecord {
                instance_id: inst.id.clone(),
                scheme: kind,
                prompt,
                output: out.output_text,
                matched: choice.index() == Some(inst.gold_index),
                refusal: refusal_reason.is_some(),
                refusal_reason,
                chosen: choice.index(),
            }))
        })
        .collect();
    let mut run = EvalRun::default();
    for (inst, o) in dataset.iter().zip(outcomes) {
        match o? {
            Some(r) => run.records.push(r),
            None => run.skipped.push(inst.id.clone()),
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub gold: usize,
    pub hard_negative: usize,
    pub random: usize,
    pub refusal: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.gold + self.hard_negative + self.random + self.refusal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqMetrics {
    /// Target-country group, or `all`.
    pub group: String,
    pub support: usize,
    pub accuracy: f64,
    pub pct_biased: f64,
    /// Share of random-option picks divided by two.
    pub pct_others: f64,
    pub refusal_rate: f64,
    pub counts: OutcomeCounts,
}

impl McqMetrics {
    fn from_counts(group: &str, c: OutcomeCounts) -> Self {
        let n = c.total();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            group: group.to_string(),
            support: n,
            accuracy: frac(c.gold),
            pct_biased: frac(c.hard_negative),
            pct_others: frac(c.random) / 2.0,
            refusal_rate: frac(c.refusal),
            counts: c,
        }
    }

    /// `Acc + %Biased + 2 %Others + Refusal`, which is 1 for any non-empty group.
    pub fn partition_sum(&self) -> f64 {
        self.accuracy + self.pct_biased + 2.0 * self.pct_others + self.refusal_rate
    }
}

/// Metrics overall (`all`) and per target group, in group order.
pub fn mcq_metrics(records: &[EvalRecord], dataset: &[McqInstance], grouping: Grouping) -> Result<Vec<McqMetrics>> {
    if records.len() != dataset.len() {
        return Err(Error::Data(format!(
            "{} records for {} instances",
            records.len(),
            dataset.len()
        )));
    }
    let mut by_group: BTreeMap<usize, OutcomeCounts> = BTreeMap::new();
    let mut all = OutcomeCounts::default();
    let groups = grouping.groups();
    for (rec, inst) in records.iter().zip(dataset) {
        if rec.instance_id != inst.id {
            return Err(Error::Data(format!(
                "record {} is aligned with instance {}",
                rec.instance_id, inst.id
            )));
        }
        let target = inst.target_label();
        let g = match grouping {
            Grouping::Resource => target.resource_group.as_str(),
            Grouping::Region => target.region_group.as_str(),
        };
        let gi = groups.iter().position(|x| *x == g).expect("known group");
        let slot = by_group.entry(gi).or_default();
        let bump = |c: &mut OutcomeCounts| match rec.chosen {
            None => c.refusal += 1,
            Some(i) => match inst.labels[i].kind {
                LabelKind::Gold => c.gold += 1,
                LabelKind::HardNegative => c.hard_negative += 1,
                LabelKind::Random => c.random += 1,
            },
        };
        if rec.chosen.is_some_and(|i| i >= inst.labels.len()) {
            return Err(Error::Data(format!(
                "record {} chose option {} of {}",
                rec.instance_id,
                rec.chosen.unwrap_or_default(),
                inst.labels.len()
            )));
        }
        bump(slot);
        bump(&mut all);
    }
    let mut out = vec![McqMetrics::from_counts("all", all)];
    out.extend(
        by_group
            .into_iter()
            .map(|(gi, c)| McqMetrics::from_counts(groups[gi], c)),
    );
    Ok(out)
}
