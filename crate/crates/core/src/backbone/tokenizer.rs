use std::path::Path;

use crate::error::{Error, Result};

/// Turns a prompt into token ids framed by start/end markers.
pub trait TextTokenizer: Send + Sync + std::fmt::Debug {
    /// Ids including the start and end markers, not yet truncated.
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    fn end_token(&self) -> u32;
}

/// Word-level tokenizer that hashes lowercase words into a fixed vocabulary.
/// Used with stand-in backbones, which have no learned vocabulary.
#[derive(Debug, Clone)]
pub struct HashTokenizer {
    vocab_size: u32,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 3, "vocabulary too small");
        Self {
            vocab_size: vocab_size as u32,
        }
    }

    fn start_token(&self) -> u32 {
        self.vocab_size - 2
    }

    fn word_id(&self, word: &str) -> u32 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % (self.vocab_size as u64 - 2)) as u32
    }
}

impl TextTokenizer for HashTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![self.start_token()];
        ids.extend(
            text.to_lowercase()
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(|w| self.word_id(w)),
        );
        ids.push(self.end_token());
        Ok(ids)
    }

    fn end_token(&self) -> u32 {
        self.vocab_size - 1
    }
}

/// Byte-pair tokenizer loaded from a `tokenizer.json` that matches the
/// pretrained text tower.
#[derive(Debug)]
pub struct BpeTokenizer {
    inner: tokenizers::Tokenizer,
    end: u32,
}

impl BpeTokenizer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let inner = tokenizers::Tokenizer::from_file(path).map_err(|e| Error::Tokenizer(e.to_string()))?;
        let end = inner
            .token_to_id("<|endoftext|>")
            .ok_or_else(|| Error::Tokenizer("tokenizer has no <|endoftext|> token".into()))?;
        Ok(Self { inner, end })
    }
}

impl TextTokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let enc = self
            .inner
            .encode(text, true)
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        Ok(enc.get_ids().to_vec())
    }

    fn end_token(&self) -> u32 {
        self.end
    }
}

/// Clip to `max_len` tokens, keeping the end marker last.
pub fn truncate(mut ids: Vec<u32>, max_len: usize, end: u32) -> (Vec<u32>, bool) {
    if ids.len() <= max_len {
        return (ids, false);
    }
    ids.truncate(max_len);
    if let Some(last) = ids.last_mut() {
        *last = end;
    }
    (ids, true)
}
