//! Synthetic agent with a known calibration profile.
//!
//! The agent answers from the dataset's own answer key, so its accuracy and
//! confidence behavior are controlled exactly. It is the test oracle for the
//! calibration properties: a Calibrated agent states confidence c and is
//! correct with probability c; a ConstantOverconfident(1.0) agent with
//! accuracy a has ECE = 1 - a.

use std::collections::HashMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatProvider, ChatRequest, CompletionResult, ProviderError};
use crate::datasets::{AnswerKind, QuestionItem};
use crate::promptkit::{render_user_question, Role};

/// Target accuracy per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracySpec {
    /// Same accuracy for every item.
    Constant(f64),
    /// Per-item accuracy drawn uniformly from [0, 1].
    Uniform,
    /// Explicit per-item schedule, indexed by dataset position (wrapping).
    Schedule(Vec<f64>),
}

impl AccuracySpec {
    fn validate(&self) -> Result<(), ProviderError> {
        let bad = |v: f64| !(0.0..=1.0).contains(&v) || !v.is_finite();
        let invalid = match self {
            AccuracySpec::Constant(v) => bad(*v),
            AccuracySpec::Uniform => false,
            AccuracySpec::Schedule(values) => {
                values.is_empty() || values.iter().any(|v| bad(*v))
            }
        };
        if invalid {
            Err(ProviderError::InvalidAgentParams(
                "accuracy values must be probabilities in [0, 1]".into(),
            ))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidencePolicy {
    /// Stated confidence equals the item accuracy; correctness is drawn
    /// Bernoulli(confidence).
    Calibrated,
    /// Stated confidence is the given constant. With a constant accuracy the
    /// correct answers follow an exact-count schedule so the realized
    /// accuracy equals the target exactly; otherwise correctness is drawn
    /// Bernoulli(accuracy).
    ConstantOverconfident(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgentParams {
    pub accuracy: AccuracySpec,
    pub policy: ConfidencePolicy,
    pub seed: u64,
}

impl SyntheticAgentParams {
    pub fn validate(&self) -> Result<(), ProviderError> {
        self.accuracy.validate()?;
        if let ConfidencePolicy::ConstantOverconfident(c) = self.policy {
            if !(0.0..=1.0).contains(&c) || !c.is_finite() {
                return Err(ProviderError::InvalidAgentParams(
                    "constant confidence must be in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

struct KeyedItem {
    index: usize,
    item: QuestionItem,
}

pub struct SyntheticAgent {
    params: SyntheticAgentParams,
    by_user_text: HashMap<String, usize>,
    items: Vec<KeyedItem>,
}

impl SyntheticAgent {
    pub fn new(items: &[QuestionItem], params: SyntheticAgentParams) -> Result<Self, ProviderError> {
        params.validate()?;
        let mut by_user_text = HashMap::new();
        let mut keyed = Vec::with_capacity(items.len());
        for (index, item) in items.iter().enumerate() {
            let user_text = render_user_question(item).map_err(|e| {
                ProviderError::InvalidAgentParams(format!("item {}: {e}", item.id))
            })?;
            by_user_text.insert(user_text, index);
            keyed.push(KeyedItem { index, item: item.clone() });
        }
        Ok(SyntheticAgent { params, by_user_text, items: keyed })
    }

    fn find_item(&self, user_text: &str) -> Option<&KeyedItem> {
        if let Some(&index) = self.by_user_text.get(user_text) {
            return Some(&self.items[index]);
        }
        // Stage-2 prompts embed the question inside surrounding text.
        self.items
            .iter()
            .filter(|k| user_text.contains(&k.item.question_text))
            .max_by_key(|k| k.item.question_text.len())
    }

    fn item_accuracy(&self, index: usize, rng: &mut ChaCha8Rng) -> f64 {
        match &self.params.accuracy {
            AccuracySpec::Constant(a) => *a,
            AccuracySpec::Uniform => rng.random::<f64>(),
            AccuracySpec::Schedule(values) => values[index % values.len()],
        }
    }
}

fn derive_rng(seed: u64, salt: &[u8]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt);
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Exact-count correctness pattern: over any prefix of n items exactly
/// floor(n * accuracy) are marked correct.
fn exact_count_correct(index: usize, accuracy: f64) -> bool {
    ((index + 1) as f64 * accuracy).floor() > (index as f64 * accuracy).floor()
}

fn wrong_answer(item: &QuestionItem) -> String {
    match item.answer_kind {
        AnswerKind::McqLetter => item
            .options
            .as_ref()
            .and_then(|options| {
                options
                    .iter()
                    .map(|(label, _)| label)
                    .find(|label| *label != &item.ground_truth)
            })
            .cloned()
            .unwrap_or_else(|| "Z".to_string()),
        AnswerKind::Boolean => {
            if item.ground_truth.eq_ignore_ascii_case("true") {
                "False".to_string()
            } else {
                "True".to_string()
            }
        }
        AnswerKind::Freeform => {
            let truth = crate::extract::normalize_freeform(&item.ground_truth);
            for candidate in ["an entirely different value", "something else entirely"] {
                let normalized = crate::extract::normalize_freeform(candidate);
                if !normalized.contains(&truth) && !truth.contains(&normalized) {
                    return candidate.to_string();
                }
            }
            let digest = Sha256::digest(item.ground_truth.as_bytes());
            format!("mismatch {}", hex::encode(&digest[..4]))
        }
    }
}

impl ChatProvider for SyntheticAgent {
    fn complete(&self, request: &ChatRequest) -> Result<CompletionResult, ProviderError> {
        let fingerprint = request.fingerprint();
        let mut rng = derive_rng(self.params.seed, fingerprint.as_bytes());

        let user_text = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
            .unwrap_or_default();
        let keyed = self.find_item(user_text).ok_or_else(|| {
            ProviderError::MalformedPayload("request does not match any known question".into())
        })?;

        let accuracy = self.item_accuracy(keyed.index, &mut rng);
        let is_rec = request
            .messages
            .iter()
            .any(|m| m.text.contains("{rec,"));

        let (percent, correct) = match self.params.policy {
            ConfidencePolicy::Calibrated => {
                let percent = (accuracy * 100.0).round();
                // Draw correctness against the stated (rounded) confidence so
                // the verbalized value is the true success probability.
                let correct = rng.random::<f64>() * 100.0 < percent;
                (percent, correct)
            }
            ConfidencePolicy::ConstantOverconfident(c) => {
                let percent = (c * 100.0).round();
                let correct = match self.params.accuracy {
                    AccuracySpec::Constant(a) => exact_count_correct(keyed.index, a),
                    _ => rng.random::<f64>() < accuracy,
                };
                (percent, correct)
            }
        };

        let content = if is_rec {
            format!("Re-examined the earlier reasoning.\n{{rec, {percent}}}")
        } else {
            let answer = if correct {
                keyed.item.ground_truth.clone()
            } else {
                wrong_answer(&keyed.item)
            };
            format!("Settled on a final answer.\n{{{answer}, {percent}}}")
        };

        Ok(CompletionResult {
            content,
            reasoning_trace: Some("Weighed the candidate answers against the question.".into()),
            input_tokens: None,
            output_tokens: None,
            reasoning_tokens: None,
            latency: Duration::ZERO,
        })
    }
}
