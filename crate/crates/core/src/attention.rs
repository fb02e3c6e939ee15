//! How much each option's tokens feed the final input token through attention.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::csv_string;
use crate::harness::prompts::RenderedPrompt;
use crate::mcq::{McqInstance, Region, ResourceLevel};
use crate::model::{CaptureSpec, Model, ModelWeights, Positions, ResidualTrace, TokenSequence};

/// `a^l_{t_c,t_s} = sum_h A^{l,h}[t_s, t_c] (x^{l-1}_{t_c} W_V^h) W_O^h`.
///
/// Needs `x^{l-1}_{t_c}` and the layer-`l` attention patterns in `trace`.
pub fn token_contribution(
    trace: &ResidualTrace,
    weights: &ModelWeights,
    source: usize,
    query: usize,
    layer: usize,
) -> Result<Array1<f64>> {
    if source > query {
        return Err(Error::CausalOrder {
            source_pos: source,
            query_pos: query,
        });
    }
    let lw = weights.layer(layer)?;
    let x = trace.hidden(layer - 1, source)?;
    let mut out = Array1::zeros(x.len());
    for (h, (wv, wo)) in lw.value.iter().zip(&lw.output).enumerate() {
        let a = trace.attention(layer, h)?;
        if query >= a.nrows() {
            return Err(Error::Range(format!("query position {query} outside the trace")));
        }
        out.scaled_add(a[[query, source]], &x.dot(wv).dot(wo));
    }
    Ok(out)
}

/// How a per-layer contribution vector becomes one number per token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean over layers of the vector norms.
    #[default]
    NormThenMean,
    /// Norm of the mean vector over layers.
    MeanThenNorm,
}

/// Contiguous token positions of one option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSpan {
    pub option_index: usize,
    pub tokens: Range<usize>,
}

/// Map the byte spans of a rendered prompt to token spans.
pub fn option_spans(model: &Model, prompt: &RenderedPrompt) -> Vec<OptionSpan> {
    prompt
        .option_spans
        .iter()
        .enumerate()
        .map(|(i, r)| OptionSpan {
            option_index: i,
            tokens: model.tokenizer().byte_range_to_tokens(r.clone()),
        })
        .collect()
}

fn check_spans(spans: &[OptionSpan], seq_len: usize) -> Result<()> {
    for s in spans {
        if s.tokens.is_empty() {
            return Err(Error::Precondition(format!(
                "option {} has an empty span",
                s.option_index
            )));
        }
        if s.tokens.end > seq_len {
            return Err(Error::Range(format!(
                "option {} span {:?} outside sequence of length {seq_len}",
                s.option_index, s.tokens
            )));
        }
    }
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            if a.tokens.start < b.tokens.end && b.tokens.start < a.tokens.end {
                return Err(Error::Precondition(format!(
                    "spans of options {} and {} overlap",
                    a.option_index, b.option_index
                )));
            }
        }
    }
    Ok(())
}

/// Per-token scores across layers `1..=L`, reduced to a scalar.
fn token_score(
    trace: &ResidualTrace,
    weights: &ModelWeights,
    source: usize,
    query: usize,
    reduction: Reduction,
) -> Result<f64> {
    let num_layers = weights.config().num_layers;
    let per_layer = (1..=num_layers)
        .map(|l| token_contribution(trace, weights, source, query, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(match reduction {
        Reduction::NormThenMean => per_layer.iter().map(|v| v.dot(v).sqrt()).sum::<f64>() / num_layers as f64,
        Reduction::MeanThenNorm => {
            let mut mean = Array1::zeros(per_layer[0].len());
            for v in &per_layer {
                mean += v;
            }
            mean /= num_layers as f64;
            mean.dot(&mean).sqrt()
        }
    })
}

/// One raw score per option: the largest token score within its span, with
/// the query at the final input position.
pub fn scalar_contribution(
    model: &Model,
    tokens: &TokenSequence,
    spans: &[OptionSpan],
    reduction: Reduction,
) -> Result<Vec<f64>> {
    let seq_len = tokens.len();
    check_spans(spans, seq_len)?;
    let positions = spans.iter().flat_map(|s| s.tokens.clone()).collect();
    let spec = CaptureSpec {
        layers: (0..=model.config().num_layers).collect(),
        positions: Positions::Set(positions),
        include_attention: true,
    };
    let trace = model.forward(tokens, &spec)?.trace;
    let query = seq_len - 1;
    spans
        .iter()
        .map(|s| {
            s.tokens.clone().try_fold(f64::NEG_INFINITY, |best, t| {
                Ok(best.max(token_score(&trace, model.weights(), t, query, reduction)?))
            })
        })
        .collect()
}

/// `(x - mean) / std` with the population std; all zeros when std is 0.
pub fn zscore_per_sample(raw: &[f64]) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|x| (x - mean) / std).collect()
}

/// Group names of a country under both groupings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTags {
    pub resource: String,
    pub region: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub instance_id: String,
    pub raw: Vec<f64>,
    pub z: Vec<f64>,
    /// `None` when the model refused.
    pub chosen: Option<usize>,
    pub correct: bool,
    pub target: GroupTags,
    pub options: Vec<GroupTags>,
}

/// Score every option of an MCQ prompt and attach group provenance.
pub fn analyze_mcq(
    model: &Model,
    instance: &McqInstance,
    prompt: &RenderedPrompt,
    chosen: Option<usize>,
    reduction: Reduction,
) -> Result<ContributionRecord> {
    let tokens = model.tokenize(&prompt.text)?;
    let spans = option_spans(model, prompt);
    if spans.len() != instance.options.len() {
        return Err(Error::Data(format!(
            "instance {}: {} spans for {} options",
            instance.id,
            spans.len(),
            instance.options.len()
        )));
    }
    let raw = scalar_contribution(model, &tokens, &spans, reduction)?;
    let tags = |r: ResourceLevel, g: Region| GroupTags {
        resource: r.as_str().to_string(),
        region: g.as_str().to_string(),
    };
    let target = instance.target_label();
    Ok(ContributionRecord {
        instance_id: instance.id.clone(),
        z: zscore_per_sample(&raw),
        raw,
        chosen,
        correct: chosen == Some(instance.gold_index),
        target: tags(target.resource_group, target.region_group),
        options: instance
            .labels
            .iter()
            .map(|l| tags(l.resource_group, l.region_group))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordFilter {
    #[default]
    IncorrectOnly,
    CorrectOnly,
    All,
}

impl RecordFilter {
    fn keeps(&self, r: &ContributionRecord) -> bool {
        match self {
            RecordFilter::IncorrectOnly => !r.correct,
            RecordFilter::CorrectOnly => r.correct,
            RecordFilter::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    #[default]
    Resource,
    Region,
}

impl Grouping {
    pub fn groups(&self) -> Vec<&'static str> {
        match self {
            Grouping::Resource => ResourceLevel::ALL.iter().map(|g| g.as_str()).collect(),
            Grouping::Region => Region::ALL.iter().map(|g| g.as_str()).collect(),
        }
    }

    fn pick<'a>(&self, tags: &'a GroupTags) -> &'a str {
        match self {
            Grouping::Resource => &tags.resource,
            Grouping::Region => &tags.region,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub target_group: String,
    pub option_group: String,
    /// `None` when no option fell in this cell.
    pub mean_z: Option<f64>,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub grouping: Grouping,
    pub filter: RecordFilter,
    pub groups: Vec<String>,
    /// Row-major over (target group, option group).
    pub cells: Vec<HeatmapCell>,
}

impl HeatmapMatrix {
    pub fn cell(&self, target: &str, option: &str) -> Option<&HeatmapCell> {
        self.cells
            .iter()
            .find(|c| c.target_group == target && c.option_group == option)
    }

    pub fn to_csv(&self) -> Result<String> {
        csv_string(&self.cells)
    }
}

/// Mean z-score per (target group, option group) cell over the kept records.
pub fn aggregate_heatmap(
    records: &[ContributionRecord],
    filter: RecordFilter,
    grouping: Grouping,
) -> Result<HeatmapMatrix> {
    let groups = grouping.groups();
    let known = |g: &str, rec: &ContributionRecord| {
        if groups.contains(&g) {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "record {}: unknown {grouping:?} group `{g}`",
                rec.instance_id
            )))
        }
    };
    let mut bins: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for rec in records.iter().filter(|r| filter.keeps(r)) {
        let target = grouping.pick(&rec.target);
        known(target, rec)?;
        if rec.options.len() != rec.z.len() {
            return Err(Error::Data(format!(
                "record {}: {} option groups for {} scores",
                rec.instance_id,
                rec.options.len(),
                rec.z.len()
            )));
        }
        for (tags, &z) in rec.options.iter().zip(&rec.z) {
            let g = grouping.pick(tags);
            known(g, rec)?;
            bins.entry((target, g)).or_default().push(z);
        }
    }
    let mut cells = Vec::with_capacity(groups.len() * groups.len());
    for &t in &groups {
        for &o in &groups {
            let (mean_z, support) = match bins.get_mut(&(t, o)) {
                Some(v) => {
                    // Sorting makes the sum independent of record order.
                    v.sort_by(f64::total_cmp);
                    (Some(v.iter().sum::<f64>() / v.len() as f64), v.len())
                }
                None => (None, 0),
            };
            cells.push(HeatmapCell {
                target_group: t.to_string(),
                option_group: o.to_string(),
                mean_z,
                support,
            });
        }
    }
    Ok(HeatmapMatrix {
        grouping,
        filter,
        groups: groups.iter().map(|g| g.to_string()).collect(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zscore_hand_values() {
        let z = zscore_per_sample(&[1.0, 2.0, 3.0, 2.0]);
        let s = 2f64.sqrt();
        for (a, b) in z.iter().zip([-s, 0.0, s, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(zscore_per_sample(&[0.4; 4]), vec![0.0; 4]);
    }

    #[test]
    fn causal_order_enforced() {
        let model = Model::new(ModelWeights::random(ModelConfig::tiny(), 1).unwrap());
        let seq = model.sequence(vec![1, 2, 3]).unwrap();
        let trace = model.forward(&seq, &CaptureSpec::all(model.config())).unwrap().trace;
        let err = token_contribution(&trace, model.weights(), 2, 1, 1);
        assert!(matches!(
            err,
            Err(Error::CausalOrder {
                source_pos: 2,
                query_pos: 1
            })
        ));
    }

    #[test]
    fn empty_and_overlapping_spans_rejected() {
        let model = Model::new(ModelWeights::random(ModelConfig::tiny(), 1).unwrap());
        let seq = model.sequence(vec![1, 2, 3, 4]).unwrap();
        let span = |i, r| OptionSpan {
            option_index: i,
            tokens: r,
        };
        let r = scalar_contribution(&model, &seq, &[span(0, 1..1)], Reduction::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
        let r = scalar_contribution(&model, &seq, &[span(0, 0..2), span(1, 1..3)], Reduction::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
        let r = scalar_contribution(&model, &seq, &[span(0, 3..5)], Reduction::default());
        assert!(matches!(r, Err(Error::Range(_))));
    }

    fn record(id: &str, correct: bool, target: &str, opts: [&str; 4], z: [f64; 4]) -> ContributionRecord {
        let tag = |g: &str| GroupTags {
            resource: g.to_string(),
            region: "Europe".to_string(),
        };
        ContributionRecord {
            instance_id: id.into(),
            raw: z.to_vec(),
            z: z.to_vec(),
            chosen: Some(0),
            correct,
            target: tag(target),
            options: opts.iter().map(|g| tag(g)).collect(),
        }
    }

    #[test]
    fn heatmap_basics() {
        let empty = aggregate_heatmap(&[], RecordFilter::All, Grouping::Resource).unwrap();
        assert!(empty.cells.iter().all(|c| c.mean_z.is_none() && c.support == 0));
        assert_eq!(empty.cells.len(), 9);

        let recs = [
            record(
                "a",
                false,
                "High",
                ["High", "Mid", "Low", "Low"],
                [1.0, -1.0, 0.5, -0.5],
            ),
            record("b", true, "High", ["High", "High", "High", "Mid"], [9.0, 9.0, 9.0, 9.0]),
        ];
        let h = aggregate_heatmap(&recs, RecordFilter::IncorrectOnly, Grouping::Resource).unwrap();
        assert_eq!(h.cell("High", "High").unwrap().mean_z, Some(1.0));
        assert_eq!(h.cell("High", "Low").unwrap().mean_z, Some(0.0));
        assert_eq!(h.cell("High", "Low").unwrap().support, 2);
        assert_eq!(h.cell("Mid", "Mid").unwrap().mean_z, None);
        assert!(h.to_csv().unwrap().contains("\nMid,Mid,,0\n"));
    }

    #[test]
    fn unknown_group_names_the_record() {
        let recs = [record("rec-7", false, "Ultra", ["High", "Mid", "Low", "Low"], [0.0; 4])];
        match aggregate_heatmap(&recs, RecordFilter::All, Grouping::Resource) {
            Err(Error::Data(m)) => assert!(m.contains("rec-7")),
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
