//! Inputs and config for the end-to-end synthetic run.

use std::fs;
use std::path::Path;

use culturescope::harness::data::write_jsonl;
use culturescope::harness::synthetic::{synthetic_qa, synthetic_shared_questions};
use culturescope::mcq::CountryTable;

pub fn three_countries() -> CountryTable {
    CountryTable::from_csv(
        "code,name,resource_group,region_group\nCN,China,High,East Asia\nKR,South Korea,Mid,East Asia\nET,Ethiopia,Low,Africa\n",
    )
    .unwrap()
}

pub fn write_inputs(dir: &Path, table: &CountryTable) {
    fs::write(dir.join("countries.csv"), table.to_csv().unwrap()).unwrap();
    write_jsonl(&dir.join("qa.jsonl"), "qa-instance", &synthetic_qa(20, table, 11)).unwrap();
    write_jsonl(
        &dir.join("shared.jsonl"),
        "shared-question",
        &synthetic_shared_questions(10, table, 12),
    )
    .unwrap();
}

pub const GOLDEN: &str = r#"
seed = 7
output_dir = "out"

[model]
preset = "tiny-text"
weights_seed = 1
letters_only = true

[data]
qa = "qa.jsonl"
shared_questions = "shared.jsonl"
country_table = "countries.csv"

[stages]
pipeline = true
cf = true
mcq = true
evaluate = true
attention = true

[pipeline]
embedder = { kind = "hashing", dim = 2 }
"#;

pub type Snapshot = Vec<(String, Vec<u8>)>;

/// Every file under `root` with its relative path, sorted.
pub fn snapshot(root: &Path) -> Snapshot {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}
