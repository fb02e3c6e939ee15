//! Configured end-to-end runs that write a self-describing run directory.
//!
//! Stages run in a fixed order (pipeline, cf, mcq, evaluate, attention) and
//! each writes under its own subdirectory. `manifest.json` is written last and
//! lists the SHA-256 of every file the run produced.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{self, csv_string, jsonl_string, parse_jsonl, read_jsonl, FORMAT_VERSION};
use super::eval::{evaluate_mcq, evaluate_open, mcq_metrics, EvalRecord, EvalSettings, KnowledgeLists, RefusalLexicon};
use super::prompts::SchemeKind;
use super::synthetic::letters_only_weights;
use crate::attention::{aggregate_heatmap, analyze_mcq, ContributionRecord, Grouping, RecordFilter, Reduction};
use crate::cf::{cf_matrix, signature, KnowledgeCorpus, KnowledgeSignature};
use crate::error::{Error, Result};
use crate::filter::KnowledgeItem;
use crate::harness::eval::mcq_prompt;
use crate::mcq::{build_dataset, CountryTable, McqInstance, SharedQuestion, Skip, Variant};
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::pipeline::{run_pipeline, InstanceFlag, PipelineConfig, PipelineRecord, QAInstance};

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "CULTURESCOPE_OUTPUT_ROOT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    #[default]
    TinyText,
}

impl Preset {
    pub fn config(&self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::TinyText => ModelConfig::tiny_text(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Weight file; when absent, weights are generated from `preset` and `weights_seed`.
    pub weights: Option<PathBuf>,
    pub preset: Preset,
    pub weights_seed: u64,
    /// Generated weights only emit lowercase letters, space and comma.
    pub letters_only: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Open-ended QA instances (JSONL).
    pub qa: Option<PathBuf>,
    /// Shared questions for MCQ building (JSONL).
    pub shared_questions: Option<PathBuf>,
    /// Prebuilt MCQ dataset (JSONL), used when the mcq stage is off.
    pub mcq_dataset: Option<PathBuf>,
    /// Country table (CSV); the built-in 14-country table when absent.
    pub country_table: Option<PathBuf>,
    /// Concept lists per country (JSON object) for the knowledge-augmented scheme.
    pub knowledge: Option<PathBuf>,
    /// Filtered knowledge items (JSONL), used by cf when the pipeline stage is off.
    pub knowledge_items: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub pipeline: bool,
    pub cf: bool,
    pub mcq: bool,
    pub evaluate: bool,
    pub attention: bool,
}

impl Stages {
    fn enabled(&self) -> Vec<&'static str> {
        [
            ("pipeline", self.pipeline),
            ("cf", self.cf),
            ("mcq", self.mcq),
            ("evaluate", self.evaluate),
            ("attention", self.attention),
        ]
        .into_iter()
        .filter(|(_, on)| *on)
        .map(|(s, _)| s)
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McqSection {
    pub variants: Vec<Variant>,
}

impl Default for McqSection {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Resource, Variant::Region],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub schemes: Vec<SchemeKind>,
    pub max_steps: usize,
    pub strict_match: bool,
    pub refusal_lexicon: RefusalLexicon,
    /// Concepts per country taken from the knowledge corpus when no list file is given.
    pub knowledge_top_k: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            schemes: SchemeKind::ALL.to_vec(),
            max_steps: 8,
            strict_match: false,
            refusal_lexicon: RefusalLexicon::default(),
            knowledge_top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub scheme: SchemeKind,
    pub reduction: Reduction,
    pub filter: RecordFilter,
    pub groupings: Vec<Grouping>,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self {
            scheme: SchemeKind::Baseline,
            reduction: Reduction::default(),
            filter: RecordFilter::default(),
            groupings: vec![Grouping::Resource, Grouping::Region],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for MCQ building.
    pub seed: u64,
    /// Relative paths resolve against the output root (see [`OUTPUT_ROOT_ENV`]).
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub stages: Stages,
    pub pipeline: PipelineConfig,
    pub mcq: McqSection,
    pub evaluate: EvaluateSection,
    pub attention: AttentionSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            model: ModelSection::default(),
            data: DataSection::default(),
            stages: Stages::default(),
            pipeline: PipelineConfig::default(),
            mcq: McqSection::default(),
            evaluate: EvaluateSection::default(),
            attention: AttentionSection::default(),
        }
    }
}

/// Set `a.b.c = value` in a TOML table. The value is read as a TOML literal
/// when it parses as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override `{assignment}` has an empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Load a config file; relative data and weight paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.model.weights);
        fix(&mut self.data.qa);
        fix(&mut self.data.shared_questions);
        fix(&mut self.data.mcq_dataset);
        fix(&mut self.data.country_table);
        fix(&mut self.data.knowledge);
        fix(&mut self.data.knowledge_items);
    }

    /// Stable hash of the configuration as deserialised.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn output_path(&self, output_root: Option<&Path>) -> PathBuf {
        match output_root {
            Some(root) if self.output_dir.is_relative() => root.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Everything loaded before any stage runs.
struct Inputs {
    model: Model,
    table: CountryTable,
    qa: Vec<QAInstance>,
    shared: Vec<SharedQuestion>,
    mcq: BTreeMap<Variant, Vec<McqInstance>>,
    knowledge: Option<KnowledgeLists>,
    knowledge_items: Option<Vec<KnowledgeItem>>,
}

fn config_err(what: &str, e: Error) -> Error {
    Error::Config(format!("{what}: {e}"))
}

fn prepare(cfg: &ExperimentConfig) -> Result<Inputs> {
    let s = &cfg.stages;
    let d = &cfg.data;
    let weights = match &cfg.model.weights {
        Some(p) => ModelWeights::load(p).map_err(|e| config_err("weights", e))?,
        None if cfg.model.letters_only => letters_only_weights(cfg.model.preset.config(), cfg.model.weights_seed)?,
        None => ModelWeights::random(cfg.model.preset.config(), cfg.model.weights_seed)?,
    };
    let model = Model::new(weights);
    let needs_text = s.pipeline || s.evaluate || s.attention;
    if needs_text && model.config().vocab_size < 257 {
        return Err(Error::Config(format!(
            "text stages need a byte vocabulary (>= 257 tokens); model has {}",
            model.config().vocab_size
        )));
    }
    let table = match &d.country_table {
        Some(p) => CountryTable::load(p).map_err(|e| config_err("country table", e))?,
        None => CountryTable::default(),
    };
    let load_opt = |p: &Option<PathBuf>, what: &str| -> Result<Option<PathBuf>> {
        match p {
            Some(p) if !p.exists() => Err(Error::Config(format!("{what} {} does not exist", p.display()))),
            other => Ok(other.clone()),
        }
    };
    let qa: Vec<QAInstance> = match load_opt(&d.qa, "qa dataset")? {
        Some(p) => read_jsonl(&p).map_err(|e| config_err("qa dataset", e))?,
        None => Vec::new(),
    };
    for inst in &qa {
        inst.validate().map_err(|e| config_err("qa dataset", e))?;
        if table.get(&inst.country).is_none() {
            return Err(Error::Config(format!(
                "qa instance {} names country {} which is not in the country table",
                inst.id, inst.country
            )));
        }
    }
    let shared: Vec<SharedQuestion> = match load_opt(&d.shared_questions, "shared questions")? {
        Some(p) => read_jsonl(&p).map_err(|e| config_err("shared questions", e))?,
        None => Vec::new(),
    };
    let mut mcq = BTreeMap::new();
    if let Some(p) = load_opt(&d.mcq_dataset, "mcq dataset")? {
        let all: Vec<McqInstance> = read_jsonl(&p).map_err(|e| config_err("mcq dataset", e))?;
        for inst in all {
            inst.validate().map_err(|e| config_err("mcq dataset", e))?;
            mcq.entry(inst.variant).or_insert_with(Vec::new).push(inst);
        }
    }
    let knowledge = match load_opt(&d.knowledge, "knowledge lists")? {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("knowledge lists: {e}")))?)
        }
        None => None,
    };
    let knowledge_items = match load_opt(&d.knowledge_items, "knowledge items")? {
        Some(p) => Some(read_jsonl(&p).map_err(|e| config_err("knowledge items", e))?),
        None => None,
    };

    if s.pipeline && qa.is_empty() {
        return Err(Error::Config("pipeline stage needs data.qa".into()));
    }
    if s.pipeline {
        PipelineConfig::resolved_layers(&cfg.pipeline, model.config().num_layers)?;
        cfg.pipeline.embedder.build()?;
    }
    if s.cf && !s.pipeline && knowledge_items.is_none() {
        return Err(Error::Config(
            "cf stage needs the pipeline stage or data.knowledge_items".into(),
        ));
    }
    if s.mcq && d.shared_questions.is_none() {
        return Err(Error::Config("mcq stage needs data.shared_questions".into()));
    }
    if (s.evaluate || s.attention) && !s.mcq && d.mcq_dataset.is_none() && qa.is_empty() {
        return Err(Error::Config(
            "evaluate/attention stages need qa data or an mcq dataset".into(),
        ));
    }
    if s.evaluate && cfg.evaluate.max_steps == 0 {
        return Err(Error::Config("evaluate.max_steps must be at least 1".into()));
    }
    Ok(Inputs {
        model,
        table,
        qa,
        shared,
        mcq,
        knowledge,
        knowledge_items,
    })
}

/// What the manifest records about a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub model: ModelConfig,
    pub stages: Vec<String>,
    /// Relative path to SHA-256 of contents.
    pub files: BTreeMap<String, String>,
}

struct RunWriter {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl RunWriter {
    fn write(&mut self, rel: &str, content: &str) -> Result<()> {
        data::write_text(&self.root.join(rel), content)?;
        self.files
            .insert(rel.to_string(), hex::encode(Sha256::digest(content.as_bytes())));
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, rel: &str, kind: &str, records: &[T]) -> Result<()> {
        self.write(rel, &jsonl_string(kind, records)?)
    }
}

/// Top-`k` concepts per country by signature weight.
pub fn knowledge_from_corpus(corpus: &KnowledgeCorpus, k: usize) -> KnowledgeLists {
    corpus
        .countries()
        .filter_map(|c| {
            let sig = signature(corpus, c);
            if sig.empty {
                return None;
            }
            let mut items: Vec<(&String, &f64)> = sig.sigma.iter().collect();
            items.sort_by(|a, b| b.1.total_cmp(a.1).then_with(|| a.0.cmp(b.0)));
            Some((
                c.to_string(),
                items.into_iter().take(k).map(|(s, _)| s.clone()).collect(),
            ))
        })
        .collect()
}

#[derive(Serialize)]
struct OpenMetricsRow<'a> {
    scheme: &'a str,
    support: usize,
    skipped: usize,
    accuracy: f64,
    refusal_rate: f64,
}

#[derive(Serialize)]
struct McqMetricsRow<'a> {
    variant: &'a str,
    scheme: &'a str,
    grouping: &'a str,
    group: String,
    support: usize,
    skipped: usize,
    accuracy: f64,
    pct_biased: f64,
    pct_others: f64,
    refusal_rate: f64,
}

fn grouping_name(g: Grouping) -> &'static str {
    match g {
        Grouping::Resource => "resource",
        Grouping::Region => "region",
    }
}

/// Run every enabled stage and write the run directory. Inputs are loaded and
/// checked before anything is written; a failing stage keeps the outputs of
/// earlier stages and is named in the manifest and in the returned error.
pub fn run_experiment(cfg: &ExperimentConfig, output_root: Option<&Path>) -> Result<PathBuf> {
    let inputs = prepare(cfg)?;
    let root = cfg.output_path(output_root);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut w = RunWriter {
        root: root.clone(),
        files: BTreeMap::new(),
    };
    let mut state = StageState::default();
    let mut failure = None;
    for stage in cfg.stages.enabled() {
        let r = match stage {
            "pipeline" => stage_pipeline(cfg, &inputs, &mut w, &mut state),
            "cf" => stage_cf(cfg, &inputs, &mut w, &mut state),
            "mcq" => stage_mcq(cfg, &inputs, &mut w, &mut state),
            "evaluate" => stage_evaluate(cfg, &inputs, &mut w, &mut state),
            "attention" => stage_attention(cfg, &inputs, &mut w, &mut state),
            _ => unreachable!("fixed stage list"),
        };
        if let Err(e) = r {
            tracing::error!(stage, error = %e, "stage failed");
            failure = Some(e.in_stage(stage));
            break;
        }
        tracing::info!(stage, "stage complete");
    }

    let (status, failed_stage, error) = match &failure {
        None => ("ok".to_string(), None, None),
        Some(Error::Stage { stage, source }) => ("failed".to_string(), Some(stage.clone()), Some(source.to_string())),
        Some(e) => ("failed".to_string(), None, Some(e.to_string())),
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "manifest".into(),
        status,
        failed_stage,
        error,
        config_hash: cfg.hash()?,
        seeds: BTreeMap::from([
            ("master".to_string(), cfg.seed),
            ("weights".to_string(), cfg.model.weights_seed),
            ("pipeline".to_string(), cfg.pipeline.seed),
        ]),
        model: *inputs.model.config(),
        stages: cfg.stages.enabled().iter().map(|s| s.to_string()).collect(),
        files: w.files,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    data::write_text(&root.join(MANIFEST), &text)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(root),
    }
}

#[derive(Default)]
struct StageState {
    items: Option<Vec<KnowledgeItem>>,
    mcq: BTreeMap<Variant, Vec<McqInstance>>,
}

impl StageState {
    fn knowledge_items<'a>(&'a self, inputs: &'a Inputs) -> Option<&'a [KnowledgeItem]> {
        self.items.as_deref().or(inputs.knowledge_items.as_deref())
    }

    fn mcq<'a>(&'a self, inputs: &'a Inputs) -> &'a BTreeMap<Variant, Vec<McqInstance>> {
        if self.mcq.is_empty() {
            &inputs.mcq
        } else {
            &self.mcq
        }
    }
}

fn stage_pipeline(cfg: &ExperimentConfig, inputs: &Inputs, w: &mut RunWriter, st: &mut StageState) -> Result<()> {
    let out = run_pipeline(&inputs.model, &inputs.qa, &cfg.pipeline)?;
    let items: Vec<KnowledgeItem> = out.items().cloned().collect();
    w.jsonl::<PipelineRecord>("pipeline/records.jsonl", "pipeline-record", &out.records)?;
    w.jsonl::<InstanceFlag>("pipeline/flags.jsonl", "pipeline-flag", &out.flags)?;
    w.jsonl("pipeline/knowledge.jsonl", "knowledge-item", &items)?;
    st.items = Some(items);
    Ok(())
}

#[derive(Serialize)]
struct CfSummary<'a> {
    format_version: u32,
    countries: &'a [String],
    excluded: &'a [String],
    universal: &'a BTreeSet<String>,
    mean: f64,
    clamped_scores: usize,
}

fn stage_cf(_cfg: &ExperimentConfig, inputs: &Inputs, w: &mut RunWriter, st: &mut StageState) -> Result<()> {
    let items = st.knowledge_items(inputs).unwrap_or_default();
    let corpus = KnowledgeCorpus::from_items(items)?;
    let sigs: Vec<KnowledgeSignature> = corpus.countries().map(|c| signature(&corpus, c)).collect();
    w.jsonl("cf/signatures.jsonl", "signature", &sigs)?;
    let m = cf_matrix(&corpus)?;
    w.write("cf/matrix.csv", &m.to_csv()?)?;
    w.write("cf/links.csv", &m.links_csv()?)?;
    w.write("cf/graph.dot", &m.to_dot())?;
    let summary = CfSummary {
        format_version: FORMAT_VERSION,
        countries: &m.countries,
        excluded: &m.excluded,
        universal: &m.universal,
        mean: m.mean,
        clamped_scores: corpus.clamped_count(),
    };
    w.write("cf/summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn stage_mcq(cfg: &ExperimentConfig, inputs: &Inputs, w: &mut RunWriter, st: &mut StageState) -> Result<()> {
    for &variant in &cfg.mcq.variants {
        let ds = build_dataset(&inputs.shared, variant, &inputs.table, cfg.seed);
        let name = variant.as_str();
        w.jsonl(&format!("mcq/{name}.jsonl"), "mcq-instance", &ds.instances)?;
        w.jsonl::<Skip>(&format!("mcq/{name}_skips.jsonl"), "mcq-skip", &ds.skips)?;
        st.mcq.insert(variant, ds.instances);
    }
    Ok(())
}

fn knowledge_lists(cfg: &ExperimentConfig, inputs: &Inputs, st: &StageState) -> Result<KnowledgeLists> {
    if let Some(k) = &inputs.knowledge {
        return Ok(k.clone());
    }
    match st.knowledge_items(inputs) {
        Some(items) => Ok(knowledge_from_corpus(
            &KnowledgeCorpus::from_items(items)?,
            cfg.evaluate.knowledge_top_k,
        )),
        None => Ok(KnowledgeLists::new()),
    }
}

fn eval_settings(cfg: &ExperimentConfig) -> EvalSettings {
    EvalSettings {
        max_steps: cfg.evaluate.max_steps,
        strict_match: cfg.evaluate.strict_match,
        refusal_lexicon: cfg.evaluate.refusal_lexicon.clone(),
    }
}

fn stage_evaluate(cfg: &ExperimentConfig, inputs: &Inputs, w: &mut RunWriter, st: &mut StageState) -> Result<()> {
    let knowledge = knowledge_lists(cfg, inputs, st)?;
    let settings = eval_settings(cfg);
    if !inputs.qa.is_empty() {
        let mut rows = Vec::new();
        for &scheme in &cfg.evaluate.schemes {
            let run = evaluate_open(&inputs.model, &inputs.qa, scheme, &inputs.table, &knowledge, &settings)?;
            w.jsonl::<EvalRecord>(
                &format!("eval/open_{}.jsonl", scheme.as_str()),
                "eval-record",
                &run.records,
            )?;
            let n = run.records.len();
            let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
            rows.push(OpenMetricsRow {
                scheme: scheme.as_str(),
                support: n,
                skipped: run.skipped.len(),
                accuracy: frac(run.records.iter().filter(|r| r.matched).count()),
                refusal_rate: frac(run.records.iter().filter(|r| r.refusal).count()),
            });
        }
        w.write("eval/open_metrics.csv", &csv_string(&rows)?)?;
    }
    let datasets = st.mcq(inputs);
    if datasets.is_empty() {
        return Ok(());
    }
    let mut rows = Vec::new();
    for (variant, dataset) in datasets {
        for &scheme in &cfg.evaluate.schemes {
            let run = evaluate_mcq(&inputs.model, dataset, scheme, &inputs.table, &knowledge, &settings)?;
            w.jsonl(
                &format!("eval/mcq_{}_{}.jsonl", variant.as_str(), scheme.as_str()),
                "eval-record",
                &run.records,
            )?;
            let evaluated: BTreeSet<&str> = run.records.iter().map(|r| r.instance_id.as_str()).collect();
            let subset: Vec<McqInstance> = dataset
                .iter()
                .filter(|i| evaluated.contains(i.id.as_str()))
                .cloned()
                .collect();
            for grouping in [Grouping::Resource, Grouping::Region] {
                for m in mcq_metrics(&run.records, &subset, grouping)? {
                    if m.group == "all" && grouping == Grouping::Region {
                        continue;
                    }
                    rows.push(McqMetricsRow {
                        variant: variant.as_str(),
                        scheme: scheme.as_str(),
                        grouping: if m.group == "all" {
                            "all"
                        } else {
                            grouping_name(grouping)
                        },
                        group: m.group.clone(),
                        support: m.support,
                        skipped: run.skipped.len(),
                        accuracy: m.accuracy,
                        pct_biased: m.pct_biased,
                        pct_others: m.pct_others,
                        refusal_rate: m.refusal_rate,
                    });
                }
            }
        }
    }
    w.write("eval/mcq_metrics.csv", &csv_string(&rows)?)
}

fn stage_attention(cfg: &ExperimentConfig, inputs: &Inputs, w: &mut RunWriter, st: &mut StageState) -> Result<()> {
    let knowledge = knowledge_lists(cfg, inputs, st)?;
    let settings = eval_settings(cfg);
    let a = &cfg.attention;
    for (variant, dataset) in st.mcq(inputs) {
        let run = evaluate_mcq(&inputs.model, dataset, a.scheme, &inputs.table, &knowledge, &settings)?;
        let chosen: BTreeMap<&str, Option<usize>> =
            run.records.iter().map(|r| (r.instance_id.as_str(), r.chosen)).collect();
        let mut records: Vec<ContributionRecord> = Vec::new();
        for inst in dataset {
            let Some(&choice) = chosen.get(inst.id.as_str()) else {
                continue;
            };
            let prompt = mcq_prompt(inst, a.scheme, &inputs.table, &knowledge)?;
            records.push(analyze_mcq(&inputs.model, inst, &prompt, choice, a.reduction)?);
        }
        let name = variant.as_str();
        w.jsonl(
            &format!("attention/{name}_records.jsonl"),
            "contribution-record",
            &records,
        )?;
        for &g in &a.groupings {
            let h = aggregate_heatmap(&records, a.filter, g)?;
            w.write(
                &format!("attention/{name}_heatmap_{}.csv", grouping_name(g)),
                &h.to_csv()?,
            )?;
        }
    }
    Ok(())
}

/// Check a run directory: every manifest entry exists with the recorded hash,
/// every record file declares the current format version, and JSONL records
/// parse as the type their header names.
pub fn validate_run_dir(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "manifest format_version {}",
            manifest.format_version
        )));
    }
    for (rel, hash) in &manifest.files {
        let path = dir.join(rel);
        let content = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(content.as_bytes())) != *hash {
            return Err(Error::Data(format!("{rel}: contents do not match the manifest hash")));
        }
        let version = if rel.ends_with(".json") {
            serde_json::from_str::<serde_json::Value>(&content)?
                .get("format_version")
                .and_then(|v| v.as_u64())
                .map(|v| v as u32)
        } else {
            data::declared_version(&content)
        };
        if version != Some(FORMAT_VERSION) {
            return Err(Error::Data(format!("{rel}: missing or unsupported format_version")));
        }
        if rel.ends_with(".jsonl") {
            check_jsonl(rel, &content)?;
        } else if rel.ends_with(".csv") {
            data::parse_csv::<BTreeMap<String, String>>(&content, rel)?;
        }
    }
    Ok(manifest)
}

fn check_jsonl(rel: &str, content: &str) -> Result<()> {
    let kind = parse_jsonl::<serde_json::Value>(content, rel)?
        .0
        .ok_or_else(|| Error::Data(format!("{rel}: missing header line")))?
        .kind;
    fn typed<T: serde::de::DeserializeOwned>(content: &str, rel: &str) -> Result<()> {
        parse_jsonl::<T>(content, rel).map(|_| ())
    }
    match kind.as_str() {
        "pipeline-record" => typed::<PipelineRecord>(content, rel),
        "pipeline-flag" => typed::<InstanceFlag>(content, rel),
        "knowledge-item" => typed::<KnowledgeItem>(content, rel),
        "signature" => typed::<KnowledgeSignature>(content, rel),
        "mcq-instance" => {
            let (_, insts) = parse_jsonl::<McqInstance>(content, rel)?;
            insts.iter().try_for_each(McqInstance::validate)
        }
        "mcq-skip" => typed::<Skip>(content, rel),
        "eval-record" => typed::<EvalRecord>(content, rel),
        "contribution-record" => typed::<ContributionRecord>(content, rel),
        other => Err(Error::Data(format!("{rel}: unknown record kind `{other}`"))),
    }
}
