//! Target token sequences and reserved-id conventions.
//!
//! A vocabulary of size V reserves blank = 0, sos = V-2, eos = V-1; content
//! token ids live in 1..V-2.

use crate::error::{HydraError, Result};

pub const BLANK_ID: usize = 0;

pub fn sos_id(vocab_size: usize) -> usize {
    vocab_size - 2
}

pub fn eos_id(vocab_size: usize) -> usize {
    vocab_size - 1
}

/// Smallest vocabulary holding blank, sos, eos and one content token.
pub const MIN_VOCAB: usize = 4;

/// A transcription as content-token ids (no blank/sos/eos).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    /// Validates that no id is reserved under a vocabulary of size V.
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            return Err(HydraError::Config(format!(
                "vocab size {vocab_size} < minimum {MIN_VOCAB}"
            )));
        }
        for &id in &ids {
            if id >= vocab_size {
                return Err(HydraError::Vocab { id, vocab: vocab_size });
            }
            if id == BLANK_ID || id == sos_id(vocab_size) || id == eos_id(vocab_size) {
                return Err(HydraError::Usage(format!(
                    "target contains reserved token id {id}"
                )));
            }
        }
        Ok(TokenSeq { ids })
    }

    /// No validation; for internal construction of already-checked ids.
    pub fn from_raw(ids: Vec<usize>) -> Self {
        TokenSeq { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn reversed(&self) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids.reverse();
        TokenSeq { ids }
    }

    /// Count of adjacent equal pairs; with U tokens the shortest CTC
    /// alignment needs U + repeats frames.
    pub fn adjacent_repeats(&self) -> usize {
        self.ids.windows(2).filter(|w| w[0] == w[1]).count()
    }
}
