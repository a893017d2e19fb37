//! Canonical question-set loading.
//!
//! Benchmarks are converted (outside this crate) into one line-delimited
//! JSON format with fields `{id, question, options?, answer, kind}` so the
//! harness stays benchmark-agnostic. Sub-sampling is expressed by
//! pre-filtered files, not loader flags.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptkit::FormatSpec;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {problem}")]
    Line {
        path: String,
        line: usize,
        problem: String,
    },
    #[error("{path}: dataset has no items")]
    Empty { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    #[serde(rename = "mcq")]
    McqLetter,
    Boolean,
    Freeform,
}

impl AnswerKind {
    pub fn key(&self) -> &'static str {
        match self {
            AnswerKind::McqLetter => "mcq",
            AnswerKind::Boolean => "boolean",
            AnswerKind::Freeform => "freeform",
        }
    }
}

/// One question in canonical form. The struct doubles as the line schema of
/// the dataset file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub id: String,
    #[serde(rename = "question")]
    pub question_text: String,
    /// Labeled options, present iff `answer_kind` is multiple choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<(String, String)>>,
    #[serde(rename = "answer")]
    pub ground_truth: String,
    #[serde(rename = "kind")]
    pub answer_kind: AnswerKind,
}

/// An ordered, validated question set with a uniform answer kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub items: Vec<QuestionItem>,
    pub answer_kind: AnswerKind,
    pub metadata: BTreeMap<String, String>,
}

/// Load a canonical line-delimited dataset file, validating every line.
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;

    let mut items: Vec<QuestionItem> = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (line_idx, line) in text.lines().enumerate() {
        let lineno = line_idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item: QuestionItem =
            serde_json::from_str(line).map_err(|e| DatasetError::Line {
                path: display.clone(),
                line: lineno,
                problem: e.to_string(),
            })?;
        let item = validate_item(item, &display, lineno)?;
        if !seen_ids.insert(item.id.clone()) {
            return Err(DatasetError::Line {
                path: display.clone(),
                line: lineno,
                problem: format!("duplicate item id {:?}", item.id),
            });
        }
        if let Some(first) = items.first() {
            if first.answer_kind != item.answer_kind {
                return Err(DatasetError::Line {
                    path: display.clone(),
                    line: lineno,
                    problem: format!(
                        "kind {:?} differs from the dataset kind {:?}",
                        item.answer_kind.key(),
                        first.answer_kind.key()
                    ),
                });
            }
        }
        items.push(item);
    }

    let answer_kind = items
        .first()
        .map(|i| i.answer_kind)
        .ok_or(DatasetError::Empty { path: display.clone() })?;

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());

    let mut metadata = BTreeMap::new();
    metadata.insert("path".to_string(), display);
    metadata.insert("format".to_string(), "jsonl-v1".to_string());

    Ok(Dataset { id, items, answer_kind, metadata })
}

fn validate_item(
    mut item: QuestionItem,
    path: &str,
    line: usize,
) -> Result<QuestionItem, DatasetError> {
    let fail = |problem: String| DatasetError::Line {
        path: path.to_string(),
        line,
        problem,
    };
    if item.id.trim().is_empty() {
        return Err(fail("empty item id".into()));
    }
    if item.question_text.trim().is_empty() {
        return Err(fail("empty question text".into()));
    }
    match item.answer_kind {
        AnswerKind::McqLetter => {
            let options = item
                .options
                .as_ref()
                .ok_or_else(|| fail("mcq item has no options".into()))?;
            if options.is_empty() {
                return Err(fail("mcq item has an empty option list".into()));
            }
            if !options.iter().any(|(label, _)| label == &item.ground_truth) {
                return Err(fail(format!(
                    "answer {:?} is not one of the option labels",
                    item.ground_truth
                )));
            }
        }
        AnswerKind::Boolean => {
            if item.options.is_some() {
                return Err(fail("boolean item must not carry options".into()));
            }
            item.ground_truth = match item.ground_truth.to_ascii_lowercase().as_str() {
                "true" => "True".to_string(),
                "false" => "False".to_string(),
                other => {
                    return Err(fail(format!(
                        "boolean answer must be True or False, got {other:?}"
                    )))
                }
            };
        }
        AnswerKind::Freeform => {
            if item.options.is_some() {
                return Err(fail("freeform item must not carry options".into()));
            }
            if item.ground_truth.trim().is_empty() {
                return Err(fail("empty answer".into()));
            }
        }
    }
    Ok(item)
}

/// Serialize a dataset back to the canonical line format.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let display = path.display().to_string();
    let io_err = |source| DatasetError::Io { path: display.clone(), source };
    let mut file = fs::File::create(path).map_err(io_err)?;
    for item in &dataset.items {
        let line = serde_json::to_string(item).expect("dataset items serialize");
        file.write_all(line.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|source| DatasetError::Io { path: display.clone(), source })?;
    }
    Ok(())
}

/// The answer-format instruction matching this dataset's kind.
pub fn format_spec(dataset: &Dataset) -> FormatSpec {
    FormatSpec::for_kind(dataset.answer_kind)
}
