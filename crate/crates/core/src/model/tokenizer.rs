//! Whitespace tokenizer with a fixed hash-to-id map.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab_size: usize,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be nonempty");
        Self { vocab_size }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Lowercased words with surrounding punctuation stripped.
    pub fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| c.is_ascii_punctuation())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect()
    }

    pub fn word_id(&self, word: &str) -> u32 {
        (fnv1a(word.as_bytes()) % self.vocab_size as u64) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        Self::words(text).iter().map(|w| self.word_id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_case_and_punctuation() {
        let t = Tokenizer::new(4096);
        assert_eq!(t.encode("A Photo of a DOG."), t.encode("a photo of a dog"));
        assert_eq!(Tokenizer::words("  itap of a {}. "), vec!["itap", "of", "a"]);
    }

    #[test]
    fn ids_are_stable() {
        let t = Tokenizer::new(4096);
        assert_eq!(t.word_id("photo"), t.word_id("photo"));
        assert!(t.encode("a photo").iter().all(|&i| (i as usize) < 4096));
    }
}
