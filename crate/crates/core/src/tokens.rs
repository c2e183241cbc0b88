//! Built-in whitespace tokenizer used by the in-process denoisers and the
//! loopback server, plus the wordlist matching shared with prompt
//! augmentation.
//!
//! Slot 0 holds the start token, prompt words follow one token per word,
//! then an end token and padding up to the context length.

use std::collections::BTreeSet;

pub const BOS: &str = "<|startoftext|>";
pub const EOS: &str = "<|endoftext|>";
pub const PAD: &str = "<|pad|>";

/// Lowercases and strips leading/trailing non-alphanumeric characters.
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub tokens: Vec<String>,
    /// Number of slots actually used by the prompt (start, words, end).
    pub used: usize,
}

impl Tokenized {
    pub fn context_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Tokenizes `prompt` into exactly `context_len` slots, truncating words
/// that do not fit between the start and end tokens.
pub fn tokenize(prompt: &str, context_len: usize) -> Tokenized {
    assert!(context_len >= 2, "context must hold start and end tokens");
    let mut tokens = vec![BOS.to_string()];
    tokens.extend(
        prompt
            .split_whitespace()
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .take(context_len - 2),
    );
    tokens.push(EOS.to_string());
    let used = tokens.len();
    tokens.resize(context_len, PAD.to_string());
    Tokenized { tokens, used }
}

/// Slots whose word appears in `wordlist` (case-insensitive).
pub fn match_wordlist(tokenized: &Tokenized, wordlist: &[String]) -> BTreeSet<usize> {
    let words: BTreeSet<String> = wordlist.iter().map(|w| normalize_word(w)).collect();
    tokenized.tokens[1..tokenized.used.saturating_sub(1)]
        .iter()
        .enumerate()
        .filter(|(_, t)| words.contains(t.as_str()))
        .map(|(i, _)| i + 1)
        .collect()
}

/// Byte span of the earliest prompt word that belongs to `wordlist`.
pub fn first_wordlist_match(prompt: &str, wordlist: &[String]) -> Option<(usize, usize)> {
    let words: BTreeSet<String> = wordlist.iter().map(|w| normalize_word(w)).collect();
    let mut offset = 0;
    for piece in prompt.split_inclusive(char::is_whitespace) {
        let word = piece.trim_end();
        let lead = word.len() - word.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
        let core = word.trim_matches(|c: char| !c.is_alphanumeric());
        if !core.is_empty() && words.contains(&core.to_lowercase()) {
            let start = offset + lead;
            return Some((start, start + core.len()));
        }
        offset += piece.len();
    }
    None
}
