use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RankingInstance, SftExample};
use crate::error::{Error, Result};

const SCHEMA: u32 = 1;

/// First line of an instance file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlHeader {
    pub schema: u32,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl JsonlHeader {
    pub fn new(config_hash: Option<String>, seed: Option<u64>) -> Self {
        JsonlHeader {
            schema: SCHEMA,
            config_hash,
            seed,
        }
    }
}

fn write_lines<T: Serialize>(items: &[T], header: &JsonlHeader, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut line = |v: String| -> Result<()> {
        w.write_all(v.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    line(serde_json::to_string(header).expect("header serializes"))?;
    for item in items {
        line(serde_json::to_string(item).expect("record serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_jsonl(instances: &[RankingInstance], header: &JsonlHeader, path: &Path) -> Result<()> {
    write_lines(instances, header, path)
}

/// Writes a supervised corpus with the same header convention.
pub fn save_sft_jsonl(examples: &[SftExample], header: &JsonlHeader, path: &Path) -> Result<()> {
    write_lines(examples, header, path)
}

/// Reads a supervised corpus written by [`save_sft_jsonl`].
pub fn load_sft_jsonl(path: &Path) -> Result<(Option<JsonlHeader>, Vec<SftExample>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: JsonlHeader =
                serde_json::from_str(line).map_err(|e| parse_err(i + 1, format!("header: {e}")))?;
            header = Some(h);
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?);
    }
    Ok((header, out))
}

/// Reads an instance file. An empty file yields no instances; otherwise the
/// first line must be a header with `"schema": 1`.
pub fn load_jsonl(path: &Path) -> Result<(Option<JsonlHeader>, Vec<RankingInstance>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut header = None;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: JsonlHeader = serde_json::from_str(&line)
                .map_err(|e| parse_err(lineno, format!("header: {e}")))?;
            if h.schema != SCHEMA {
                return Err(parse_err(lineno, format!("unsupported schema {}", h.schema)));
            }
            header = Some(h);
            continue;
        }
        let inst: RankingInstance =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if inst.relevance.0.len() != inst.candidates.len() {
            return Err(parse_err(
                lineno,
                format!(
                    "field `relevance` has {} grades for {} candidates",
                    inst.relevance.0.len(),
                    inst.candidates.len()
                ),
            ));
        }
        if !seen.insert(inst.instance_id.clone()) {
            return Err(Error::DuplicateInstance(inst.instance_id));
        }
        out.push(inst);
    }
    Ok((header, out))
}
