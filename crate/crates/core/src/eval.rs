//! Recognition metrics: exact-match accuracy and Levenshtein-normalized edit
//! similarity, vocabulary sampling and CLIP prompt augmentation.
//!
//! Distances count unicode scalar values, so multi-byte scripts compare by
//! character rather than by byte.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::first_wordlist_match;

pub const DEFAULT_MIN_WORD_LEN: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no records to aggregate")]
    Empty,
    #[error("asked for {requested} words but only {available} of {total} have at least {min_len} characters")]
    NotEnoughWords {
        requested: usize,
        available: usize,
        total: usize,
        min_len: usize,
    },
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - D(a, b) / max(|a|, |b|)`; two empty strings score 1.
pub fn norm_edit(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub ground_truth: String,
    pub recognized: String,
    pub norm_edit: f64,
    pub exact: bool,
}

impl EvalRecord {
    pub fn new(ground_truth: impl Into<String>, recognized: impl Into<String>) -> Self {
        let ground_truth = ground_truth.into();
        let recognized = recognized.into();
        Self {
            norm_edit: norm_edit(&ground_truth, &recognized),
            exact: ground_truth == recognized,
            ground_truth,
            recognized,
        }
    }
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(records.iter().filter(|r| r.exact).count() as f64 / records.len() as f64)
}

pub fn mean_norm_edit(records: &[EvalRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(records.iter().map(|r| r.norm_edit).sum::<f64>() / records.len() as f64)
}

/// Inserts ` that reads '<text>'` right after the first wordlist word, or
/// appends `, that reads '<text>'` when no word matches.
pub fn augment_prompt(prompt: &str, text: &str, wordlist: &[String]) -> String {
    if text.is_empty() {
        return prompt.to_string();
    }
    let clause = format!("that reads '{text}'");
    match first_wordlist_match(prompt, wordlist) {
        Some((_, end)) => format!("{} {clause}{}", &prompt[..end], &prompt[end..]),
        None => format!("{}, {clause}", prompt.trim_end()),
    }
}

/// Seeded sample without replacement of `n` words having at least
/// `min_len` characters.
pub fn sample_vocab(words: &[String], min_len: usize, n: usize, seed: u64) -> Result<Vec<String>, EvalError> {
    let mut pool: Vec<&String> = words.iter().filter(|w| w.chars().count() >= min_len).collect();
    if pool.len() < n {
        return Err(EvalError::NotEnoughWords {
            requested: n,
            available: pool.len(),
            total: words.len(),
            min_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = pool.partial_shuffle(&mut rng, n);
    Ok(picked.iter().map(|w| w.to_string()).collect())
}

/// Source of recognized text for generated images.
pub trait TextRecognizer {
    type Error: std::error::Error;
    fn recognize(&self, image: &image::RgbImage) -> Result<Vec<String>, Self::Error>;
}

impl TextRecognizer for crate::wire::Client {
    type Error = crate::wire::WireError;
    fn recognize(&self, image: &image::RgbImage) -> Result<Vec<String>, Self::Error> {
        self.ocr(image)
    }
}
