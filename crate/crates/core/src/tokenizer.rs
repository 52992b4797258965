//! Byte-level tokenizer with five reserved special tokens.

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const YES: u32 = 259;
pub const NO: u32 = 260;
pub const VOCAB_SIZE: usize = 261;

/// Each byte is its own token; `PAD`, `BOS`, `EOS`, `YES`, `NO` sit above
/// the byte range. `YES` and `NO` decode to the words "Yes" and "No".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| u32::from(b)).collect()
    }

    /// Inverse of [`encode`](Self::encode): byte tokens map back to their
    /// bytes and special tokens are dropped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect()
    }

    /// Text for generated ids: bytes decode lossily as UTF-8, `YES`/`NO`
    /// render as words, other specials and unknown ids are skipped.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                YES => bytes.extend_from_slice(b"Yes"),
                NO => bytes.extend_from_slice(b"No"),
                _ => {}
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn answer_token(&self, answer: bool) -> u32 {
        if answer {
            YES
        } else {
            NO
        }
    }
}
