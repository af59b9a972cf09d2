use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::text::SEP_TOKEN;
use crate::decoder::{BOS, EOS, PAD, SEP, UNK};
use crate::error::{Error, Result};

/// Reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", SEP_TOKEN];

/// Token ↔ id mapping with the frequency table it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Every non-reserved token seen while building, with its count, in rank
    /// order.
    frequencies: Vec<(String, u64)>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    frequencies: Vec<(String, u64)>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_parts(f.tokens, f.frequencies)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.tokens,
            frequencies: v.frequencies,
        }
    }
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, frequencies: Vec<(String, u64)>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            frequencies,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequencies(&self) -> &[(String, u64)] {
        &self.frequencies
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]).to_owned())
            .collect()
    }

    /// Fraction of counted token occurrences that map to a kept id.
    pub fn coverage(&self) -> f64 {
        let total: u64 = self.frequencies.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return 1.0;
        }
        let kept: u64 = self
            .frequencies
            .iter()
            .filter(|(t, _)| self.index.contains_key(t))
            .map(|(_, c)| c)
            .sum();
        kept as f64 / total as f64
    }
}

/// Counts tokens over `sequences`, ranks them by descending count with a
/// lexicographic tie-break, and keeps the top `cap − 5` that occur at least
/// `min_freq` times.
pub fn build_vocab<'a, I, S>(sequences: I, cap: usize, min_freq: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    if cap < SPECIAL_TOKENS.len() {
        return Err(Error::Config(format!(
            "vocabulary cap {cap} is smaller than the {} reserved tokens",
            SPECIAL_TOKENS.len()
        )));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for seq in sequences {
        for t in seq {
            let t = t.as_ref();
            if !SPECIAL_TOKENS.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, u64)> =
        counts.into_iter().map(|(t, c)| (t.to_owned(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .iter()
            .filter(|(_, c)| *c >= min_freq)
            .take(cap - SPECIAL_TOKENS.len())
            .map(|(t, _)| t.clone()),
    );
    debug_assert_eq!(tokens[SEP], SEP_TOKEN);
    Ok(Vocabulary::from_parts(tokens, ranked))
}
