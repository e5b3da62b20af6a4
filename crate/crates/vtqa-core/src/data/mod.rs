//! Dataset records, JSON loading with full-file validation, and vocabulary
//! construction.

pub mod features;
pub mod synth;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, RecordIssue, Result};
use crate::metrics::{normalize_answer, normalize_key, AnswerType, YesNo};
use crate::model::{AnswerVocab, TokenVocab, Vocabularies};

pub use features::{FeatureContainer, FeatureRecord};

/// Reference record counts of the full-scale benchmark splits (train, val,
/// test-dev, test). Tooling may compare against them; loaders never
/// require them.
pub const SPLIT_SIZES: [(&str, usize); 4] =
    [("train", 11312), ("val", 1245), ("test-dev", 2189), ("test", 9035)];

/// One dataset record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Example {
    pub qid: String,
    pub image_local_path: String,
    pub text: String,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yes_or_no: Option<YesNo>,
}

/// Loaded examples plus non-fatal warnings.
#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub examples: Vec<Example>,
    pub warnings: Vec<String>,
}

fn string_field(
    obj: &serde_json::Map<String, Value>,
    field: &str,
    record: &str,
    issues: &mut Vec<RecordIssue>,
) -> Option<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) if field == "qid" => Some(n.to_string()),
        Some(other) => {
            issues.push(RecordIssue {
                record: record.to_string(),
                field: field.to_string(),
                message: format!("expected a string, got {other}"),
            });
            None
        }
        None => {
            issues.push(RecordIssue {
                record: record.to_string(),
                field: field.to_string(),
                message: "missing".to_string(),
            });
            None
        }
    }
}

fn validate_record(
    obj: &serde_json::Map<String, Value>,
    position: usize,
    issues: &mut Vec<RecordIssue>,
) -> Option<Example> {
    let record = match obj.get("qid") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("record #{position}"),
    };
    let before = issues.len();
    let qid = string_field(obj, "qid", &record, issues);
    let image_local_path = string_field(obj, "image_local_path", &record, issues);
    let text = string_field(obj, "text", &record, issues);
    let question = string_field(obj, "question", &record, issues);
    let answer = string_field(obj, "answer", &record, issues);

    let answer_type = match obj.get("answer_type") {
        Some(Value::String(s)) => match s.as_str() {
            "YN" => Some(AnswerType::Yn),
            "E" => Some(AnswerType::E),
            "G" => Some(AnswerType::G),
            other => {
                issues.push(RecordIssue {
                    record: record.clone(),
                    field: "answer_type".to_string(),
                    message: format!("`{other}` is not one of YN, E, G"),
                });
                None
            }
        },
        Some(other) => {
            issues.push(RecordIssue {
                record: record.clone(),
                field: "answer_type".to_string(),
                message: format!("expected a string, got {other}"),
            });
            None
        }
        None => {
            issues.push(RecordIssue {
                record: record.clone(),
                field: "answer_type".to_string(),
                message: "missing".to_string(),
            });
            None
        }
    };

    let yes_or_no = match obj.get("yes_or_no") {
        None => None,
        Some(Value::String(s)) => match s.as_str() {
            "yes" => Some(YesNo::Yes),
            "no" => Some(YesNo::No),
            other => {
                issues.push(RecordIssue {
                    record: record.clone(),
                    field: "yes_or_no".to_string(),
                    message: format!("`{other}` is not yes|no"),
                });
                None
            }
        },
        Some(other) => {
            issues.push(RecordIssue {
                record: record.clone(),
                field: "yes_or_no".to_string(),
                message: format!("expected a string, got {other}"),
            });
            None
        }
    };

    // Cross-field invariants.
    match answer_type {
        Some(AnswerType::Yn) => {
            if yes_or_no.is_none() {
                issues.push(RecordIssue {
                    record: record.clone(),
                    field: "yes_or_no".to_string(),
                    message: "required for YN answers".to_string(),
                });
            }
        }
        Some(_) => {
            if obj.contains_key("yes_or_no") {
                issues.push(RecordIssue {
                    record: record.clone(),
                    field: "yes_or_no".to_string(),
                    message: "only valid on YN answers".to_string(),
                });
            }
        }
        None => {}
    }
    if let Some(t) = &text {
        if t.is_empty() {
            issues.push(RecordIssue {
                record: record.clone(),
                field: "text".to_string(),
                message: "must be non-empty".to_string(),
            });
        }
    }
    if let Some(q) = &question {
        if q.is_empty() {
            issues.push(RecordIssue {
                record: record.clone(),
                field: "question".to_string(),
                message: "must be non-empty".to_string(),
            });
        }
    }

    if issues.len() > before {
        return None;
    }
    Some(Example {
        qid: qid?,
        image_local_path: image_local_path?,
        text: text?,
        question: question?,
        answer: answer?,
        answer_type: answer_type?,
        yes_or_no,
    })
}

/// Parse a dataset JSON file (array of records, or object keyed by qid),
/// reporting every offending record at once.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let content = std::fs::read_to_string(path)?;
    load_dataset_str(&content)
}

pub fn load_dataset_str(content: &str) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    if content.trim().is_empty() {
        out.warnings.push("dataset file is empty".to_string());
        return Ok(out);
    }
    let value: Value = serde_json::from_str(content)?;
    let records: Vec<Value> = match value {
        Value::Array(items) => items,
        Value::Object(map) => map.into_iter().map(|(_, v)| v).collect(),
        other => {
            return Err(Error::format(format!(
                "dataset must be a JSON array or object of records, got {other}"
            )))
        }
    };
    if records.is_empty() {
        out.warnings.push("dataset contains no records".to_string());
        return Ok(out);
    }

    let mut issues = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, record) in records.iter().enumerate() {
        let obj = match record.as_object() {
            Some(o) => o,
            None => {
                issues.push(RecordIssue {
                    record: format!("record #{i}"),
                    field: "-".to_string(),
                    message: "not a JSON object".to_string(),
                });
                continue;
            }
        };
        if let Some(ex) = validate_record(obj, i, &mut issues) {
            if let Some(first) = seen.insert(ex.qid.clone(), i) {
                issues.push(RecordIssue {
                    record: ex.qid.clone(),
                    field: "qid".to_string(),
                    message: format!("duplicate of record #{first}"),
                });
                continue;
            }
            out.examples.push(ex);
        }
    }
    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }
    Ok(out)
}

/// Write examples as a pretty-printed JSON array (the on-disk form
/// `load_dataset` reads back field for field).
pub fn serialize_dataset(examples: &[Example], writer: impl std::io::Write) -> Result<()> {
    serde_json::to_writer_pretty(writer, examples)?;
    Ok(())
}

/// Token and answer vocabularies from a training split.
///
/// Tokens come from texts and questions with a frequency floor; answers are
/// the distinct normalized training answers (YN examples contribute their
/// yes/no label) with "yes"/"no" always present.
pub fn build_vocabularies(train: &[Example], min_freq: usize) -> Result<Vocabularies> {
    if train.is_empty() {
        return Err(Error::contract("build_vocabularies: empty training split"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in train {
        for tok in normalize_answer(&ex.text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
        for tok in normalize_answer(&ex.question) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let tokens = TokenVocab::new(kept.into_iter().map(|(t, _)| t));

    let mut answer_set: Vec<String> = train
        .iter()
        .map(|ex| match (ex.answer_type, ex.yes_or_no) {
            (AnswerType::Yn, Some(label)) => label.to_string(),
            _ => normalize_key(&ex.answer),
        })
        .collect();
    answer_set.push("yes".to_string());
    answer_set.push("no".to_string());
    answer_set.sort();
    answer_set.dedup();
    let answers = AnswerVocab::new(answer_set);

    Ok(Vocabularies { tokens, answers })
}
