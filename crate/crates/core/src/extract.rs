//! Parses `{X, Y}` answer/confidence pairs out of raw model output and
//! grades answers against ground truth.
//!
//! Models restate their final answer at the end of a response, so parsing
//! selects the last brace group that yields a valid pair; earlier groups
//! (set notation, payload fragments) are ignored. A response with no valid
//! group is a completion failure, not a fault: completion rate is exactly
//! the fraction of responses that follow the instructed format.

use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{AnswerKind, QuestionItem};

/// Which curly-brace protocol a response is expected to follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseKind {
    /// Stage-1 `{X, Y}`: answer and confidence percent.
    AnswerConfidence,
    /// Stage-2 `{rec, Y}`: the literal tag `rec` and a confidence percent.
    RecConfidence,
}

/// Why a response failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    NoBraces,
    BadNumber,
    OutOfRange,
    WrongTag,
}

impl FailureReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            FailureReason::NoBraces => "no-braces",
            FailureReason::BadNumber => "bad-number",
            FailureReason::OutOfRange => "out-of-range",
            FailureReason::WrongTag => "wrong-tag",
        }
    }
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A response that did not follow the required format. This is a value-level
/// outcome, not an error: the record it lands on stays in the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionFailure {
    pub reason: FailureReason,
}

impl std::fmt::Display for CompletionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "completion failure: {}", self.reason)
    }
}

/// A successfully parsed final answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    /// Absent for `{rec, Y}` responses, which carry no answer.
    pub answer: Option<String>,
    pub confidence_percent: f64,
    /// Character range of the matched brace group in the input.
    pub source_span: Range<usize>,
}

fn brace_groups() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{[^{}]*\}").expect("valid regex"))
}

fn parse_group(inner: &str, kind: ParseKind) -> Result<(Option<String>, f64), FailureReason> {
    let comma = inner.rfind(',').ok_or(FailureReason::BadNumber)?;
    let answer_part = inner[..comma].trim();
    let number_part = inner[comma + 1..].trim();
    if answer_part.is_empty() {
        return Err(FailureReason::BadNumber);
    }
    let value: f64 = number_part.parse().map_err(|_| FailureReason::BadNumber)?;
    if !value.is_finite() {
        return Err(FailureReason::BadNumber);
    }
    if !(0.0..=100.0).contains(&value) {
        return Err(FailureReason::OutOfRange);
    }
    match kind {
        ParseKind::AnswerConfidence => Ok((Some(answer_part.to_string()), value)),
        ParseKind::RecConfidence => {
            if answer_part.eq_ignore_ascii_case("rec") {
                Ok((None, value))
            } else {
                Err(FailureReason::WrongTag)
            }
        }
    }
}

/// Scan the whole output for `{...}` groups and return the last one that
/// parses as the expected protocol. When no group parses, the failure
/// reason comes from the final group (or `no-braces` if there was none).
pub fn parse_final(text: &str, kind: ParseKind) -> Result<ParsedResponse, CompletionFailure> {
    let mut last_valid: Option<ParsedResponse> = None;
    let mut last_reason: Option<FailureReason> = None;

    for group in brace_groups().find_iter(text) {
        let inner = &text[group.start() + 1..group.end() - 1];
        match parse_group(inner, kind) {
            Ok((answer, confidence_percent)) => {
                last_valid = Some(ParsedResponse {
                    answer,
                    confidence_percent,
                    source_span: group.range(),
                });
            }
            Err(reason) => last_reason = Some(reason),
        }
    }

    match (last_valid, last_reason) {
        (Some(parsed), _) => Ok(parsed),
        (None, Some(reason)) => Err(CompletionFailure { reason }),
        (None, None) => Err(CompletionFailure { reason: FailureReason::NoBraces }),
    }
}

/// How answers are graded against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GradingMode {
    McqLetter,
    Boolean,
    FreeformNormalized,
    /// Ask a judge model whether the answer and the ground truth mean the
    /// same thing. Used only when explicitly configured.
    FreeformJudge { model: String },
}

impl GradingMode {
    /// Grading mode implied by a dataset kind, with the configured freeform
    /// handling.
    pub fn for_kind(kind: AnswerKind, freeform: &GradingMode) -> GradingMode {
        match kind {
            AnswerKind::McqLetter => GradingMode::McqLetter,
            AnswerKind::Boolean => GradingMode::Boolean,
            AnswerKind::Freeform => freeform.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum GradeError {
    #[error("grading unavailable: {0}")]
    Unavailable(String),
}

/// Answer-vs-truth equivalence decided by an external model.
pub trait MeaningJudge {
    fn same_meaning(
        &self,
        question: &str,
        ground_truth: &str,
        answer: &str,
    ) -> Result<bool, String>;
}

/// Lowercase, strip punctuation, collapse whitespace. Idempotent.
pub fn normalize_freeform(text: &str) -> String {
    let mapped: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_to_alphanumeric(text: &str) -> String {
    text.chars().filter(|c| c.is_alphanumeric()).collect()
}

/// Grade a parsed answer against the item's ground truth.
///
/// The judge is consulted only in `FreeformJudge` mode; grading without one
/// configured is a grading-unavailable error and the record is kept
/// ungraded.
pub fn grade(
    answer: &str,
    item: &QuestionItem,
    mode: &GradingMode,
    judge: Option<&dyn MeaningJudge>,
) -> Result<bool, GradeError> {
    match mode {
        GradingMode::McqLetter => {
            let got = strip_to_alphanumeric(answer);
            let want = strip_to_alphanumeric(&item.ground_truth);
            Ok(!got.is_empty() && got.eq_ignore_ascii_case(&want))
        }
        GradingMode::Boolean => {
            let normalized = normalize_freeform(answer);
            let value = match normalized.as_str() {
                "true" | "yes" => Some(true),
                "false" | "no" => Some(false),
                _ => None,
            };
            let truth = item.ground_truth.eq_ignore_ascii_case("true");
            Ok(value == Some(truth))
        }
        GradingMode::FreeformNormalized => {
            let got = normalize_freeform(answer);
            let want = normalize_freeform(&item.ground_truth);
            Ok(!got.is_empty()
                && !want.is_empty()
                && (got.contains(&want) || want.contains(&got)))
        }
        GradingMode::FreeformJudge { .. } => {
            let judge = judge
                .ok_or_else(|| GradeError::Unavailable("no judge model configured".into()))?;
            judge
                .same_meaning(&item.question_text, &item.ground_truth, answer)
                .map_err(GradeError::Unavailable)
        }
    }
}
