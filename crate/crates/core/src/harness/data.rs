//! Record files.
//!
//! JSONL files start with a header line `{"format_version":1,"kind":...}`;
//! CSV files start with a `# format_version=1` comment line.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonlHeader {
    pub format_version: u32,
    pub kind: String,
}

/// Serialise records as JSONL with a header line.
pub fn jsonl_string<T: Serialize>(kind: &str, records: &[T]) -> Result<String> {
    let header = JsonlHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse JSONL. A header line is optional on input (plain JSONL datasets are
/// accepted); when present its version must match.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<(Option<JsonlHeader>, Vec<T>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<JsonlHeader>(line) {
                if h.format_version != FORMAT_VERSION {
                    return Err(Error::Data(format!(
                        "{origin}: format_version {} is not supported",
                        h.format_version
                    )));
                }
                header = Some(h);
                continue;
            }
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Data(format!("{origin}:{}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok((header, records))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_jsonl(&text, &path.display().to_string())?.1)
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, kind: &str, records: &[T]) -> Result<()> {
    write_text(path, &jsonl_string(kind, records)?)
}

/// Serialise rows as CSV under a version comment line.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let body = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(format!(
        "# format_version={FORMAT_VERSION}\n{}",
        String::from_utf8(body).expect("csv output is UTF-8")
    ))
}

/// Parse CSV rows, skipping `#` comment lines.
pub fn parse_csv<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Data(format!("{origin}: {e}")))
}

/// The `format_version` declared by a file's first line, if any.
pub fn declared_version(text: &str) -> Option<u32> {
    let first = text.lines().next()?.trim();
    if let Some(rest) = first
        .strip_prefix("# format_version=")
        .or_else(|| first.strip_prefix("// format_version="))
    {
        return rest.trim().parse().ok();
    }
    serde_json::from_str::<serde_json::Value>(first)
        .ok()?
        .get("format_version")?
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
}
