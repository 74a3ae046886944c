use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{GeneratorDataset, NewsExample};
use crate::error::{Error, Result};

/// Reads `{"text": .., "label": 0|1, "generator": ..}` lines and groups them
/// by generator in order of first appearance.
pub fn load_jsonl(path: &Path) -> Result<Vec<GeneratorDataset>> {
    let text = std::fs::read_to_string(path)?;
    parse_jsonl(&text, path)
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<GeneratorDataset>> {
    let mut out: Vec<GeneratorDataset> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let example = parse_line(line, path, line_no)?;
        match out.iter_mut().find(|d| d.generator == example.generator) {
            Some(d) => d.examples.push(example),
            None => out.push(GeneratorDataset {
                generator: example.generator.clone(),
                examples: vec![example],
            }),
        }
    }
    Ok(out)
}

fn parse_line(line: &str, path: &Path, line_no: usize) -> Result<NewsExample> {
    let parse_err = |message: String| Error::Parse {
        path: PathBuf::from(path),
        line: line_no,
        message,
    };
    let invalid = |message: String| Error::Validation {
        path: PathBuf::from(path),
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err("expected a JSON object".into()))?;
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err("missing string field `text`".into()))?;
    let generator = obj
        .get("generator")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err("missing string field `generator`".into()))?;
    let label = obj
        .get("label")
        .ok_or_else(|| parse_err("missing field `label`".into()))?;
    let label = match label.as_u64() {
        Some(0) => 0,
        Some(1) => 1,
        _ => return Err(invalid(format!("label must be 0 or 1, got {label}"))),
    };
    if text.trim().is_empty() {
        return Err(invalid("text is empty".into()));
    }
    Ok(NewsExample {
        text: text.to_string(),
        label,
        generator: generator.to_string(),
    })
}

pub fn to_jsonl(datasets: &[GeneratorDataset]) -> Result<String> {
    let mut s = String::new();
    for d in datasets {
        for e in &d.examples {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
    }
    Ok(s)
}

pub fn write_jsonl(path: &Path, datasets: &[GeneratorDataset]) -> Result<()> {
    crate::io::write_atomic(path, to_jsonl(datasets)?.as_bytes())
}
