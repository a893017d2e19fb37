//! Judge-model grading: asks a configured model whether a freeform answer
//! and the ground truth mean the same thing.

use std::sync::Arc;

use super::{ChatProvider, ChatRequest, ModelSpec, ReasoningEffort};
use crate::extract::MeaningJudge;
use crate::promptkit::Message;

pub struct JudgeClient {
    provider: Arc<dyn ChatProvider>,
    model: ModelSpec,
}

impl JudgeClient {
    pub fn new(provider: Arc<dyn ChatProvider>, model: ModelSpec) -> Self {
        JudgeClient { provider, model }
    }
}

impl MeaningJudge for JudgeClient {
    fn same_meaning(
        &self,
        question: &str,
        ground_truth: &str,
        answer: &str,
    ) -> Result<bool, String> {
        let request = ChatRequest {
            model: self.model.clone(),
            messages: vec![
                Message::system(
                    "You grade answers. Reply with exactly one word: yes or no.",
                ),
                Message::user(format!(
                    "Question: {question}\nReference answer: {ground_truth}\n\
                     Candidate answer: {answer}\n\
                     Do the candidate answer and the reference answer mean the same \
                     thing in the context of the question? Reply yes or no."
                )),
            ],
            effort: ReasoningEffort::Unspecified,
            temperature: Some(0.0),
            seed: None,
            max_output_tokens: Some(16),
        };
        let result = self.provider.complete(&request).map_err(|e| e.to_string())?;
        let verdict = result
            .content
            .split_whitespace()
            .next()
            .unwrap_or("")
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        match verdict.as_str() {
            "yes" => Ok(true),
            "no" => Ok(false),
            other => Err(format!("judge replied {other:?}, expected yes or no")),
        }
    }
}
