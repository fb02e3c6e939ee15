//! Byte-level tokenizer owned by the engine.
//!
//! Id 0 is end-of-sequence; byte `b` maps to id `b + 1`. Ids above 256 are
//! valid model outputs but decode to nothing. Encoding is lossless, so token
//! positions coincide with byte offsets in the encoded text.

use std::ops::Range;

use super::ModelConfig;
use crate::error::{Error, Result};

pub const EOS_TOKEN: usize = 0;

const BYTE_OFFSET: usize = 1;

/// A validated, non-empty sequence of token ids that fits the model context.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, config: &ModelConfig) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Length("token sequence is empty".into()));
        }
        if ids.len() > config.max_seq_len {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len(),
                config.max_seq_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::Range(format!(
                "token id {bad} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        Ok(Self { ids })
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

    /// Append `tail`, revalidating the combined length.
    pub fn concat(&self, tail: &[usize], config: &ModelConfig) -> Result<Self> {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(tail);
        Self::new(ids, config)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ByteTokenizer {
    config: ModelConfig,
}

impl ByteTokenizer {
    pub fn new(config: ModelConfig) -> Self {
        Self { config }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.trim().is_empty() {
            return Err(Error::Length("text is empty".into()));
        }
        let ids = text.bytes().map(|b| b as usize + BYTE_OFFSET).collect();
        TokenSequence::new(ids, &self.config).map_err(|e| match e {
            Error::Range(msg) => Error::Range(format!(
                "{msg}: the byte tokenizer needs a vocabulary of at least 257 for arbitrary text"
            )),
            other => other,
        })
    }

    /// Inverse of [`tokenize`](Self::tokenize); EOS and ids above the byte range are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&id| id_to_byte(id)).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Token positions covering a byte range of text encoded by this tokenizer.
    pub fn byte_range_to_tokens(&self, range: Range<usize>) -> Range<usize> {
        range
    }
}

fn id_to_byte(id: usize) -> Option<u8> {
    id.checked_sub(BYTE_OFFSET).and_then(|b| u8::try_from(b).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> ByteTokenizer {
        ByteTokenizer::new(ModelConfig::tiny_text())
    }

    #[test]
    fn empty_text_is_a_length_error() {
        assert!(matches!(tok().tokenize(""), Err(Error::Length(_))));
        assert!(matches!(tok().tokenize("  \n"), Err(Error::Length(_))));
    }

    #[test]
    fn deterministic() {
        let t = tok();
        assert_eq!(t.tokenize("Zakynthos").unwrap(), t.tokenize("Zakynthos").unwrap());
    }

    #[test]
    fn too_long_is_a_length_error() {
        let cfg = ModelConfig {
            max_seq_len: 4,
            ..ModelConfig::tiny_text()
        };
        let t = ByteTokenizer::new(cfg);
        assert!(matches!(t.tokenize("hello"), Err(Error::Length(_))));
    }

    #[test]
    fn small_vocab_cannot_encode_letters() {
        let t = ByteTokenizer::new(ModelConfig::tiny());
        assert!(matches!(t.tokenize("a"), Err(Error::Range(_))));
    }

    #[test]
    fn eos_and_unused_ids_decode_to_nothing() {
        assert_eq!(tok().detokenize(&[EOS_TOKEN, 0x61 + 1, 258, 259]), "a");
    }

    proptest! {
        #[test]
        fn round_trip(text in "\\PC{1,100}") {
            prop_assume!(!text.trim().is_empty());
            let t = tok();
            let seq = t.tokenize(&text).unwrap();
            prop_assert_eq!(t.detokenize(seq.ids()), text);
        }
    }
}
