//! JSONL task datasets.
//!
//! The first line declares the label kind, e.g.
//! `{"label_kind": "classification", "num_classes": 3}`; every further line
//! is one example `{"text_a": …, "text_b": …, "label": …}` with `text_b` and
//! `label` optional. Blank lines are skipped.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;
use vega_core::finetune::{Label, Split, TaskDataset, TaskExample};
use vega_core::heads::LabelKind;
use vega_core::{Error, Result};

use crate::vocab::Vocab;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    text_a: String,
    #[serde(default)]
    text_b: Option<String>,
    #[serde(default)]
    label: Option<Value>,
}

fn parse_label(kind: LabelKind, v: &Value, line: usize) -> Result<Label> {
    let schema = |message: String| Error::Schema { line, message };
    match kind {
        LabelKind::Classification { num_classes } => {
            let c = v
                .as_u64()
                .ok_or_else(|| schema(format!("classification label must be a non-negative integer, got {v}")))?;
            if c as usize >= num_classes {
                return Err(schema(format!("label {c} outside {num_classes} classes")));
            }
            Ok(Label::Class(c as usize))
        }
        LabelKind::Regression => {
            let s = v
                .as_f64()
                .filter(|s| s.is_finite())
                .ok_or_else(|| schema(format!("regression label must be a finite number, got {v}")))?;
            Ok(Label::Score(s))
        }
    }
}

/// Parses dataset text. Either every example carries a label or none does.
pub fn parse_dataset(text: &str, vocab: &Vocab, max_len: usize, split: Split) -> Result<TaskDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::Schema {
        line: 1,
        message: "missing label_kind header".into(),
    })?;
    let kind: LabelKind = serde_json::from_str(header).map_err(|e| Error::Schema {
        line: hline + 1,
        message: format!("invalid label_kind header: {e}"),
    })?;
    if kind == (LabelKind::Classification { num_classes: 0 }) {
        return Err(Error::Schema {
            line: hline + 1,
            message: "num_classes must be at least 1".into(),
        });
    }
    let mut examples = Vec::new();
    let mut labeled: Option<bool> = None;
    for (i, raw) in lines {
        let line = i + 1;
        let value: Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let ex: Line = serde_json::from_value(value).map_err(|e| Error::Schema {
            line,
            message: e.to_string(),
        })?;
        let label = ex.label.as_ref().map(|v| parse_label(kind, v, line)).transpose()?;
        match labeled {
            Some(l) if l != label.is_some() => {
                return Err(Error::Schema {
                    line,
                    message: "labeled and unlabeled examples are mixed".into(),
                })
            }
            _ => labeled = Some(label.is_some()),
        }
        examples.push(TaskExample {
            tokens: vocab.encode(&ex.text_a, ex.text_b.as_deref(), max_len),
            label,
        });
    }
    log::info!("loaded {} examples ({:?})", examples.len(), kind);
    Ok(TaskDataset::new(examples, kind, split))
}

pub fn load_dataset(path: &Path, vocab: &Vocab, max_len: usize, split: Split) -> Result<TaskDataset> {
    parse_dataset(&fs::read_to_string(path)?, vocab, max_len, split)
}
