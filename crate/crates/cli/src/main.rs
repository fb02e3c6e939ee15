use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use culturescope::filter::{EmbedderConfig, ItemOrigin, KnowledgeFilter};
use culturescope::harness::experiment::{run_experiment, validate_run_dir, ExperimentConfig, Preset, OUTPUT_ROOT_ENV};
use culturescope::harness::synthetic::letters_only_weights;
use culturescope::model::ModelWeights;
use tracing::info;

#[derive(Parser)]
#[command(
    name = "culturescope",
    version,
    about = "Probe, score and evaluate cultural knowledge in small transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded random weights to a JSON file.
    GenerateWeights {
        #[arg(long, value_enum, default_value = "tiny-text")]
        preset: PresetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bias the unembedding so greedy output is lowercase words.
        #[arg(long)]
        letters_only: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Extract, inspect and filter knowledge (pipeline stage only).
    RunPipeline(RunArgs),
    /// Score candidate knowledge strings against an input text.
    Filter {
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        /// Embedder as JSON, e.g. '{"kind":"hashing","dim":64}'.
        #[arg(long)]
        embedder: Option<String>,
        #[arg(long, default_value = "")]
        country: String,
        candidates: Vec<String>,
    },
    /// Flattening scores from knowledge items (cf stage only).
    CfScore(RunArgs),
    /// Build hard-negative MCQ datasets (mcq stage only).
    BuildMcq(RunArgs),
    /// Open-ended and MCQ evaluation (evaluate stage only).
    Evaluate(RunArgs),
    /// Option attention contributions and heatmaps (attention stage only).
    Attention(RunArgs),
    /// Validate a run directory and summarise its manifest.
    Report { run_dir: PathBuf },
    /// Run every stage enabled in the config.
    Run(RunArgs),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PresetArg {
    Tiny,
    TinyText,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::TinyText => Preset::TinyText,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.weights_seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root for relative output directories.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
}

const STAGES: [&str; 5] = ["pipeline", "cf", "mcq", "evaluate", "attention"];

fn load_config(args: &RunArgs, only: Option<&str>) -> Result<ExperimentConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(stage) = only {
        overrides.extend(STAGES.iter().map(|s| format!("stages.{s}={}", *s == stage)));
    }
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml("", &overrides)?,
    };
    Ok(cfg)
}

fn run(args: &RunArgs, only: Option<&str>) -> Result<()> {
    let cfg = load_config(args, only)?;
    let out = run_experiment(&cfg, args.output_root.as_deref())?;
    info!(dir = %out.display(), "run finished");
    println!("{}", out.display());
    Ok(())
}

fn generate_weights(preset: Preset, seed: u64, letters_only: bool, out: &Path) -> Result<()> {
    let w = if letters_only {
        letters_only_weights(preset.config(), seed)?
    } else {
        ModelWeights::random(preset.config(), seed)?
    };
    w.save(out).with_context(|| format!("writing {}", out.display()))?;
    info!(path = %out.display(), "weights written");
    Ok(())
}

fn filter(input: &str, threshold: f64, embedder: Option<&str>, country: &str, candidates: &[String]) -> Result<()> {
    let cfg: EmbedderConfig = match embedder {
        Some(json) => serde_json::from_str(json).context("parsing --embedder")?,
        None => serde_json::from_str(r#"{"kind":"hashing"}"#)?,
    };
    let f = KnowledgeFilter::new(cfg.build()?, threshold)?;
    let origin = ItemOrigin {
        country: country.to_string(),
        instance_id: String::new(),
        layer: 0,
    };
    for item in f.filter(candidates, input, &origin)? {
        println!("{}", serde_json::to_string(&item)?);
    }
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let m = validate_run_dir(dir)?;
    println!("status: {}", m.status);
    if let Some(stage) = &m.failed_stage {
        println!("failed stage: {stage}");
    }
    if let Some(err) = &m.error {
        println!("error: {err}");
    }
    println!("stages: {}", m.stages.join(", "));
    println!("config hash: {}", m.config_hash);
    for (path, digest) in &m.files {
        println!("{digest}  {path}");
    }
    if m.status != "ok" {
        bail!("run did not complete");
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::GenerateWeights {
            preset,
            seed,
            letters_only,
            out,
        } => generate_weights(preset.into(), seed, letters_only, &out),
        Command::RunPipeline(a) => run(&a, Some("pipeline")),
        Command::Filter {
            input,
            threshold,
            embedder,
            country,
            candidates,
        } => filter(&input, threshold, embedder.as_deref(), &country, &candidates),
        Command::CfScore(a) => run(&a, Some("cf")),
        Command::BuildMcq(a) => run(&a, Some("mcq")),
        Command::Evaluate(a) => run(&a, Some("evaluate")),
        Command::Attention(a) => run(&a, Some("attention")),
        Command::Report { run_dir } => report(&run_dir),
        Command::Run(a) => run(&a, None),
    }
}
