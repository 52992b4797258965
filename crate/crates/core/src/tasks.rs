//! Boolean question answering records, the prompt protocol, and JSONL I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{ByteTokenizer, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolExample {
    pub question: String,
    pub passage: String,
    pub answer: bool,
}

impl BoolExample {
    pub fn new(
        passage: impl Into<String>,
        question: impl Into<String>,
        answer: bool,
    ) -> Result<Self> {
        let ex = Self {
            passage: passage.into(),
            question: question.into(),
            answer,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.passage.is_empty() || self.question.is_empty() {
            return Err(Error::Config(
                "passage and question must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

pub const INSTRUCTION: &str = "Answer with Yes or No.";
const PASSAGE_MARKER: &str = "\nPassage: ";
const QUESTION_MARKER: &str = "\nQuestion: ";
const ANSWER_MARKER: &str = "\nAnswer:";

/// Instruction line, passage, question, and a trailing `Answer:` marker.
/// The answer itself never appears in the prompt.
pub fn format_prompt(example: &BoolExample) -> String {
    format!(
        "{INSTRUCTION}{PASSAGE_MARKER}{}{QUESTION_MARKER}{}{ANSWER_MARKER}",
        example.passage, example.question
    )
}

/// Recovers `(passage, question)` from a prompt built by [`format_prompt`].
pub fn parse_prompt(prompt: &str) -> Option<(String, String)> {
    let rest = prompt
        .strip_prefix(INSTRUCTION)?
        .strip_prefix(PASSAGE_MARKER)?;
    let rest = rest.strip_suffix(ANSWER_MARKER)?;
    let (passage, question) = rest.rsplit_once(QUESTION_MARKER)?;
    Some((passage.to_string(), question.to_string()))
}

/// Prompt tokens with the answer token to be predicted at the last prompt
/// position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisedRecord {
    pub prompt_tokens: Vec<u32>,
    pub answer_token: u32,
    pub last_position: usize,
}

/// `BOS` + prompt bytes. Must leave room for one answer token.
pub fn prompt_tokens(
    example: &BoolExample,
    tokenizer: &ByteTokenizer,
    max_seq: usize,
) -> Result<Vec<u32>> {
    let mut tokens = Vec::with_capacity(example.passage.len() + 64);
    tokens.push(BOS);
    tokens.extend(tokenizer.encode(format_prompt(example).as_bytes()));
    if tokens.len() + 1 > max_seq {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: max_seq.saturating_sub(1),
        });
    }
    Ok(tokens)
}

pub fn build_supervised_record(
    example: &BoolExample,
    tokenizer: &ByteTokenizer,
    max_seq: usize,
) -> Result<SupervisedRecord> {
    let prompt_tokens = prompt_tokens(example, tokenizer, max_seq)?;
    Ok(SupervisedRecord {
        last_position: prompt_tokens.len() - 1,
        answer_token: tokenizer.answer_token(example.answer),
        prompt_tokens,
    })
}

impl SupervisedRecord {
    /// Prompt, answer, and `EOS`: the text a language-model objective
    /// sees.
    pub fn full_sequence(&self) -> Vec<u32> {
        let mut seq = self.prompt_tokens.clone();
        seq.push(self.answer_token);
        seq.push(EOS);
        seq
    }
}

#[derive(Deserialize)]
struct JsonlRow {
    question: String,
    passage: String,
    answer: bool,
}

/// Parses BoolQ-layout JSONL: one object per line with string `question`,
/// string `passage`, and boolean `answer`. Other fields are ignored and
/// blank lines skipped.
pub fn read_boolq_jsonl<R: BufRead>(reader: R) -> Result<Vec<BoolExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let ex = BoolExample {
            question: row.question,
            passage: row.passage,
            answer: row.answer,
        };
        ex.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_boolq_jsonl(path: impl AsRef<Path>) -> Result<Vec<BoolExample>> {
    read_boolq_jsonl(BufReader::new(File::open(path)?))
}

pub fn write_boolq_jsonl<W: Write>(mut writer: W, examples: &[BoolExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut writer, ex)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
