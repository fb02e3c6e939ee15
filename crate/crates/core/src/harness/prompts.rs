//! Prompt templates for the three input schemes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How much cultural context the prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    /// The bare task template.
    Baseline,
    /// Names the country of interest.
    Cultural,
    /// Names the country and prepends a concept list.
    KnowledgeAugmented,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [
        SchemeKind::Baseline,
        SchemeKind::Cultural,
        SchemeKind::KnowledgeAugmented,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::Baseline => "baseline",
            SchemeKind::Cultural => "cultural",
            SchemeKind::KnowledgeAugmented => "knowledge-augmented",
        }
    }
}

/// Task template family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    /// Short-answer commonsense questions.
    CommonsenseQa,
    /// Entity extraction from a text passage.
    ExtractiveQa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptScheme {
    pub kind: SchemeKind,
    pub template: TemplateKind,
}

/// What the prompt asks about.
#[derive(Debug, Clone, Copy)]
pub enum PromptTask<'a> {
    Question(&'a str),
    Extract { text: &'a str, entity_type: &'a str },
    MultipleChoice { question: &'a str, options: &'a [String] },
}

/// Inputs a scheme may require beyond the task itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptContext<'a> {
    /// Display name of the country of interest.
    pub country: Option<&'a str>,
    pub knowledge: Option<&'a [String]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Byte range of each option inside the option-list block (MCQ only).
    pub option_spans: Vec<Range<usize>>,
}

pub const OPTION_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

const OPTIONS_HEADER: &str = "\n\nOptions:\n";

pub fn render_prompt(scheme: &PromptScheme, task: PromptTask<'_>, ctx: PromptContext<'_>) -> Result<RenderedPrompt> {
    let country = match scheme.kind {
        SchemeKind::Baseline => None,
        _ => Some(
            ctx.country
                .filter(|c| !c.trim().is_empty())
                .ok_or_else(|| Error::Config(format!("the {} scheme requires a country", scheme.kind.as_str())))?,
        ),
    };
    let concepts = match scheme.kind {
        SchemeKind::KnowledgeAugmented => {
            let list = ctx.knowledge.unwrap_or_default();
            if list.is_empty() {
                return Err(Error::Config(
                    "the knowledge-augmented scheme requires a non-empty concept list".into(),
                ));
            }
            Some(list.join(", "))
        }
        _ => None,
    };
    let preamble = country
        .map(|c| format!("You are given a question about {c}. "))
        .unwrap_or_default();

    let text = match (scheme.template, task) {
        (TemplateKind::CommonsenseQa, PromptTask::Question(q)) => match concepts {
            None => format!(
                "{preamble}Answer the question.\n\nQuestion: {q}\n\nProvide your answer as \"Answer: [Answer]\""
            ),
            Some(ck) => format!(
                "{preamble}Answer the question, you can use list of concepts if it's relevant.\n\nConcepts: {ck}\n\nQuestion: {q}\n\nProvide your answer as \"Answer: [Answer]\""
            ),
        },
        (TemplateKind::CommonsenseQa, PromptTask::MultipleChoice { question, options }) => {
            if options.len() != OPTION_LETTERS.len() {
                return Err(Error::Data(format!(
                    "multiple-choice prompts need 4 options, got {}",
                    options.len()
                )));
            }
            let head = match concepts {
                None => format!("{preamble}Answer the question.\n\nQuestion: {question}"),
                Some(ck) => format!(
                    "{preamble}Answer the question, you can use list of concepts if it's relevant.\n\nConcepts: {ck}\n\nQuestion: {question}"
                ),
            };
            let list: Vec<String> = OPTION_LETTERS
                .iter()
                .zip(options)
                .map(|(l, o)| format!("{l}. {o}"))
                .collect();
            let text = format!(
                "{head}{OPTIONS_HEADER}{}\n\nProvide your answer as \"Answer: [Letter]\"",
                list.join("\n")
            );
            let option_spans = locate_option_spans(&text, options)?;
            return Ok(RenderedPrompt { text, option_spans });
        }
        (TemplateKind::ExtractiveQa, PromptTask::Extract { text, entity_type }) => {
            let task = format!(
                "Extract the {entity_type} mentioned in the following text:\n\nText: {text}\n\nReply only with the name of the {entity_type} mentioned"
            );
            match concepts {
                None => format!("{preamble}{task}"),
                Some(ck) => format!(
                    "{preamble}You can use the hints if they are relevant\n\nHints: {ck}\n\n{task}"
                ),
            }
        }
        (template, _) => {
            return Err(Error::Config(format!(
                "task does not fit the {template:?} template"
            )))
        }
    };
    Ok(RenderedPrompt {
        text,
        option_spans: Vec::new(),
    })
}

/// Byte ranges of each option's text, searched for inside the option-list
/// block so that an option repeated elsewhere in the prompt is not picked up.
pub fn locate_option_spans(prompt: &str, options: &[String]) -> Result<Vec<Range<usize>>> {
    let block = prompt
        .rfind(OPTIONS_HEADER)
        .ok_or_else(|| Error::Data("prompt has no option-list block".into()))?;
    OPTION_LETTERS
        .iter()
        .zip(options)
        .map(|(letter, opt)| {
            let needle = format!("\n{letter}. {opt}");
            let at = prompt[block..]
                .find(&needle)
                .ok_or_else(|| Error::Data(format!("option {letter} `{opt}` not found in prompt")))?;
            let start = block + at + needle.len() - opt.len();
            Ok(start..start + opt.len())
        })
        .collect()
}
