//! Generation-based yes/no evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate_greedy, ModelWeights};
use crate::reft::IntervenedModel;
use crate::tasks::{prompt_tokens, BoolExample};
use crate::tokenizer::{ByteTokenizer, EOS};

pub const MAX_NEW_TOKENS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Yes,
    No,
    Unknown,
}

/// Case-sensitive substring test; "Yes" wins when both appear.
pub fn extract_answer(generated: &str) -> Prediction {
    if generated.contains("Yes") {
        Prediction::Yes
    } else if generated.contains("No") {
        Prediction::No
    } else {
        Prediction::Unknown
    }
}

impl Prediction {
    pub fn matches(self, answer: bool) -> bool {
        matches!(
            (self, answer),
            (Prediction::Yes, true) | (Prediction::No, false)
        )
    }
}

/// `100·correct/total` rounded to two decimals.
pub fn accuracy_percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (100.0 * correct as f64 / total as f64 * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lora_epochs: usize,
    pub reft_epochs: usize,
    pub num_validation_samples: usize,
    pub correct_predictions: usize,
    pub accuracy_percent: f64,
    pub unknown_predictions: usize,
    pub wall_seconds: f64,
}

impl EvalReport {
    pub fn with_epochs(mut self, lora_epochs: usize, reft_epochs: usize) -> Self {
        self.lora_epochs = lora_epochs;
        self.reft_epochs = reft_epochs;
        self
    }
}

/// Greedy-decodes up to five tokens per example and scores the extracted
/// answer. Prompts that do not fit the context count as `Unknown`.
pub fn evaluate(
    weights: &ModelWeights,
    intervention: Option<&IntervenedModel<'_>>,
    examples: &[BoolExample],
    tokenizer: &ByteTokenizer,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Config("no evaluation examples".into()));
    }
    let start = Instant::now();
    let max_seq = weights.config().max_seq;
    let (mut correct, mut unknown) = (0, 0);
    for (i, ex) in examples.iter().enumerate() {
        let prediction = match prompt_tokens(ex, tokenizer, max_seq) {
            Ok(prompt) => {
                let generated = match intervention {
                    Some(m) => m.generate(&prompt, MAX_NEW_TOKENS, Some(EOS))?,
                    None => generate_greedy(weights, &prompt, MAX_NEW_TOKENS, &[], Some(EOS))?,
                };
                extract_answer(&tokenizer.decode_text(&generated))
            }
            Err(Error::SequenceTooLong { len, max }) => {
                log::warn!("example {i}: prompt of {len} tokens exceeds {max}; scored as unknown");
                Prediction::Unknown
            }
            Err(e) => return Err(e),
        };
        if prediction == Prediction::Unknown {
            unknown += 1;
        }
        if prediction.matches(ex.answer) {
            correct += 1;
        }
    }
    Ok(EvalReport {
        lora_epochs: 0,
        reft_epochs: 0,
        num_validation_samples: examples.len(),
        correct_predictions: correct,
        accuracy_percent: accuracy_percent(correct, examples.len()),
        unknown_predictions: unknown,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
