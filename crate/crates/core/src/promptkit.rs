//! Renders the message sequences sent to models: the four elicitation
//! strategies for stage 1 and the three introspection prompts for stage 2.
//!
//! All prompt texts are versioned constants shipped as plain-text files
//! under `prompts/` so they can be audited without reading code; tests pin
//! their hashes. Rendering is deterministic and zero-shot: the only example
//! in any sequence is the single `{X, Y}` format illustration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{AnswerKind, QuestionItem};
use crate::extract::ParseKind;

/// "You are a smart entity. Do not use the internet."
pub const IDENTITY_PREAMBLE: &str = include_str!("../prompts/identity.txt");
pub const STRATEGY_BASIC: &str = include_str!("../prompts/strategy_basic.txt");
pub const STRATEGY_CHAIN_OF_THOUGHT: &str =
    include_str!("../prompts/strategy_chain_of_thought.txt");
pub const STRATEGY_MULTI_STEP: &str = include_str!("../prompts/strategy_multi_step.txt");
/// Template with a `{K}` placeholder for the guess count.
pub const STRATEGY_TOP_K_TEMPLATE: &str = include_str!("../prompts/strategy_top_k.txt");
pub const FORMAT_FREEFORM: &str = include_str!("../prompts/format_freeform.txt");
pub const FORMAT_MCQ: &str = include_str!("../prompts/format_mcq.txt");
pub const FORMAT_BOOLEAN: &str = include_str!("../prompts/format_boolean.txt");
pub const IUQ_LOW: &str = include_str!("../prompts/iuq_low.txt");
pub const IUQ_MEDIUM: &str = include_str!("../prompts/iuq_medium.txt");
pub const IUQ_HIGH: &str = include_str!("../prompts/iuq_high.txt");
/// Closing instruction requesting the `{rec, Y}` confidence.
pub const IUQ_CLOSING: &str = include_str!("../prompts/iuq_closing.txt");
/// Appended to stage-1 prompts for providers that do not expose traces.
pub const TRACE_REQUEST: &str = include_str!("../prompts/trace_request.txt");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("multiple-choice question {0:?} has no options")]
    MissingOptions(String),
    #[error("question {id:?} has kind {found} but the format expects {expected}")]
    KindMismatch {
        id: String,
        found: &'static str,
        expected: &'static str,
    },
    #[error("top-k strategy requires k >= 1")]
    ZeroK,
    #[error("IUQ-High must not be given the stage-1 confidence")]
    HighConfidenceForbidden,
    #[error("IUQ-{0} requires the stage-1 confidence")]
    MissingConfidence(&'static str),
    #[error("stage-1 reasoning trace is empty")]
    EmptyTrace,
}

/// One of the four elicitation strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptStrategy {
    Basic,
    ChainOfThought,
    MultiStep,
    TopK {
        #[serde(default = "default_top_k")]
        k: u32,
    },
}

fn default_top_k() -> u32 {
    5
}

impl PromptStrategy {
    /// Top-K with the default K = 5.
    pub fn top_k() -> Self {
        PromptStrategy::TopK { k: default_top_k() }
    }

    /// Short stable key used in record keys and report columns.
    pub fn key(&self) -> &'static str {
        match self {
            PromptStrategy::Basic => "basic",
            PromptStrategy::ChainOfThought => "cot",
            PromptStrategy::MultiStep => "multi_step",
            PromptStrategy::TopK { .. } => "top_k",
        }
    }

    /// The strategy instruction text, verbatim from the shipped constants.
    pub fn instruction_text(&self) -> Result<String, PromptError> {
        Ok(match self {
            PromptStrategy::Basic => STRATEGY_BASIC.to_string(),
            PromptStrategy::ChainOfThought => STRATEGY_CHAIN_OF_THOUGHT.to_string(),
            PromptStrategy::MultiStep => STRATEGY_MULTI_STEP.to_string(),
            PromptStrategy::TopK { k } => {
                if *k == 0 {
                    return Err(PromptError::ZeroK);
                }
                STRATEGY_TOP_K_TEMPLATE.replace("{K}", &k.to_string())
            }
        })
    }
}

/// Conservativeness level of the stage-2 introspection prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IuqLevel {
    Low,
    Medium,
    High,
}

impl IuqLevel {
    pub fn key(&self) -> &'static str {
        match self {
            IuqLevel::Low => "low",
            IuqLevel::Medium => "medium",
            IuqLevel::High => "high",
        }
    }

    pub fn instruction_text(&self) -> &'static str {
        match self {
            IuqLevel::Low => IUQ_LOW,
            IuqLevel::Medium => IUQ_MEDIUM,
            IuqLevel::High => IUQ_HIGH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message { role: Role::System, text: text.into() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message { role: Role::User, text: text.into() }
    }
}

/// Ordered role-tagged messages realizing one prompt.
pub type MessageSequence = Vec<Message>;

/// All message texts joined, for searching a rendered sequence.
pub fn sequence_text(sequence: &[Message]) -> String {
    sequence
        .iter()
        .map(|m| m.text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// The answer-format instruction for a dataset kind, always naming the
/// `{X, Y}` curly-brace protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct FormatSpec {
    pub answer_kind: AnswerKind,
    pub instruction_text: String,
    pub parse_kind: ParseKind,
}

impl FormatSpec {
    pub fn for_kind(kind: AnswerKind) -> FormatSpec {
        let instruction_text = match kind {
            AnswerKind::McqLetter => FORMAT_MCQ,
            AnswerKind::Boolean => FORMAT_BOOLEAN,
            AnswerKind::Freeform => FORMAT_FREEFORM,
        };
        FormatSpec {
            answer_kind: kind,
            instruction_text: instruction_text.to_string(),
            parse_kind: ParseKind::AnswerConfidence,
        }
    }
}

/// The user-facing question text: the question itself, with labeled options
/// one per line in dataset order for multiple choice.
pub fn render_user_question(question: &QuestionItem) -> Result<String, PromptError> {
    match question.answer_kind {
        AnswerKind::McqLetter => {
            let options = question
                .options
                .as_ref()
                .filter(|o| !o.is_empty())
                .ok_or_else(|| PromptError::MissingOptions(question.id.clone()))?;
            let mut text = question.question_text.clone();
            for (label, option) in options {
                text.push_str(&format!("\n({label}) {option}"));
            }
            Ok(text)
        }
        AnswerKind::Boolean | AnswerKind::Freeform => Ok(question.question_text.clone()),
    }
}

/// Render the stage-1 elicitation sequence:
/// identity preamble, strategy instruction, format instruction, question.
pub fn render_prompt(
    strategy: PromptStrategy,
    format: &FormatSpec,
    question: &QuestionItem,
) -> Result<MessageSequence, PromptError> {
    if question.answer_kind != format.answer_kind {
        return Err(PromptError::KindMismatch {
            id: question.id.clone(),
            found: question.answer_kind.key(),
            expected: format.answer_kind.key(),
        });
    }
    Ok(vec![
        Message::system(IDENTITY_PREAMBLE),
        Message::system(strategy.instruction_text()?),
        Message::system(format.instruction_text.clone()),
        Message::user(render_user_question(question)?),
    ])
}

/// Append the trace-request sentence for providers that do not expose their
/// reasoning traces, so stage 2 can consume the response content instead.
pub fn append_trace_request(sequence: &mut MessageSequence) {
    sequence.push(Message::system(TRACE_REQUEST));
}

fn format_percent(percent: f64) -> String {
    if percent.fract() == 0.0 {
        format!("{percent:.0}")
    } else {
        format!("{percent}")
    }
}

/// Render the stage-2 introspection sequence for a fresh context: identity
/// preamble, level instruction, the question plus embedded stage-1 trace and
/// answer (and confidence for Low/Medium), then the `{rec, Y}` closing
/// instruction. The sequence never asks for an updated answer.
pub fn render_iuq_stage2(
    level: IuqLevel,
    question_text: &str,
    stage1_trace: &str,
    stage1_answer: &str,
    stage1_confidence: Option<f64>,
) -> Result<MessageSequence, PromptError> {
    if stage1_trace.trim().is_empty() {
        return Err(PromptError::EmptyTrace);
    }
    match (level, stage1_confidence) {
        (IuqLevel::High, Some(_)) => return Err(PromptError::HighConfidenceForbidden),
        (IuqLevel::Low, None) => return Err(PromptError::MissingConfidence("Low")),
        (IuqLevel::Medium, None) => return Err(PromptError::MissingConfidence("Medium")),
        _ => {}
    }

    let mut user_text = format!(
        "The question is: {question_text}\n\n\
         The given reasoning process and answer is: {stage1_trace}\n\n\
         The final answer from the first model is: {stage1_answer}"
    );
    if let Some(percent) = stage1_confidence {
        user_text.push_str(&format!(
            "\nThe confidence from the first model is: {}",
            format_percent(percent)
        ));
    }

    Ok(vec![
        Message::system(IDENTITY_PREAMBLE),
        Message::system(level.instruction_text()),
        Message::user(user_text),
        Message::system(IUQ_CLOSING),
    ])
}
