use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use culturescope::harness::data::write_jsonl;
use culturescope::harness::synthetic::{synthetic_qa, synthetic_shared_questions};
use culturescope::mcq::CountryTable;
use culturescope::model::ModelWeights;

fn cli(args: &[&str], cwd: &Path, root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_culturescope"));
    cmd.args(args).current_dir(cwd).env_remove("CULTURESCOPE_OUTPUT_ROOT");
    if let Some(r) = root {
        cmd.env("CULTURESCOPE_OUTPUT_ROOT", r);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_inputs(dir: &Path) {
    let table = CountryTable::default();
    write_jsonl(&dir.join("qa.jsonl"), "qa-instance", &synthetic_qa(8, &table, 1)).unwrap();
    write_jsonl(
        &dir.join("shared.jsonl"),
        "shared-question",
        &synthetic_shared_questions(4, &table, 2),
    )
    .unwrap();
}

const CONFIG: &str = r#"
output_dir = "exp"

[model]
weights = "weights.json"

[data]
qa = "qa.jsonl"
shared_questions = "shared.jsonl"

[stages]
pipeline = true
cf = true
mcq = true
evaluate = true
attention = true

[pipeline]
embedder = { kind = "hashing", dim = 2 }
"#;

#[test]
fn generate_weights_writes_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cli(
        &["generate-weights", "--preset", "tiny", "--seed", "4", "--out", "w.json"],
        dir.path(),
        None,
    ));
    let w = ModelWeights::load(&dir.path().join("w.json")).unwrap();
    assert_eq!(w, ModelWeights::random(*w.config(), 4).unwrap());
}

#[test]
fn full_run_under_output_root_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(&cli(
        &[
            "generate-weights",
            "--letters-only",
            "--seed",
            "1",
            "--out",
            "weights.json",
        ],
        dir.path(),
        None,
    ));
    let printed = ok(&cli(&["run", "--config", "run.toml"], dir.path(), Some(root.path())));
    let run_dir = root.path().join("exp");
    assert_eq!(printed.trim(), run_dir.display().to_string());
    let summary = ok(&cli(&["report", run_dir.to_str().unwrap()], dir.path(), None));
    assert!(summary.starts_with("status: ok\n"));
    assert!(summary.contains("stages: pipeline, cf, mcq, evaluate, attention"));
    assert!(summary.contains("cf/matrix.csv"));
}

#[test]
fn single_stage_commands_accept_overrides() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let shared = dir.path().join("shared.jsonl");
    let set = format!("data.shared_questions=\"{}\"", shared.display());
    let printed = ok(&cli(
        &[
            "build-mcq",
            "--set",
            &set,
            "--set",
            "output_dir=mcq-only",
            "--set",
            "seed=5",
        ],
        dir.path(),
        None,
    ));
    let run_dir = dir.path().join(printed.trim());
    assert!(run_dir.join("mcq/region.jsonl").exists());
    assert!(!run_dir.join("pipeline").exists());
    let summary = ok(&cli(&["report", printed.trim()], dir.path(), None));
    assert!(summary.contains("stages: mcq\n"));
}

#[test]
fn filter_prints_kept_items() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&cli(
        &[
            "filter",
            "--input",
            "green tea ceremony",
            "--threshold",
            "0.5",
            "--country",
            "JP",
            "green tea ceremony",
            "motorway traffic",
        ],
        dir.path(),
        None,
    ));
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["text"], "green tea ceremony");
    assert_eq!(lines[0]["country"], "JP");
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        &[
            "run",
            "--set",
            "model.weights=\"/missing/w.json\"",
            "--set",
            "stages.cf=true",
        ],
        dir.path(),
        None,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
    assert!(!dir.path().join("run").exists());
    let out = cli(&["run", "--set", "no_equals_sign"], dir.path(), None);
    assert!(!out.status.success());
    let out = cli(&["report", "nowhere"], dir.path(), None);
    assert!(!out.status.success());
}
