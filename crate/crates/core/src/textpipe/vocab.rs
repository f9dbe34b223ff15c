use std::collections::HashMap;
use std::path::Path;

use super::tokenize;
use crate::error::{Error, Result};

pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";

/// Word ↔ index bijection. Indices 0, 1, 2 are `<start>`, `<end>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[0] != START || words[1] != END || words[2] != UNK {
            return Err(Error::Dataset(
                "vocabulary must start with <start>, <end>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    /// Vocabulary size `D`.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn end(&self) -> usize {
        1
    }

    pub fn unk(&self) -> usize {
        2
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Maps words to indices; unknown words become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.get(t.as_ref()).unwrap_or(self.unk()))
            .collect()
    }

    /// `<start> w… <end>`, the decoder target sequence.
    pub fn encode_with_bounds<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut v = Vec::with_capacity(tokens.len() + 2);
        v.push(self.start());
        v.extend(self.encode(tokens));
        v.push(self.end());
        v
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.word(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// One word per line; the line number is the index.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Builds a vocabulary from training descriptions. Words seen fewer than
/// `min_count` times are left out (they encode as `<unk>`). Order: frequency
/// descending, then lexicographic.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count && ![START, END, UNK].contains(&w.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words = [START, END, UNK]
        .into_iter()
        .map(str::to_string)
        .chain(kept.into_iter().map(|(w, _)| w))
        .collect();
    Vocab::from_words(words).expect("specials are first and words are unique")
}
