use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    DT,
    JJ,
    NN,
    IN,
    VB,
    PRP,
    CC,
    PUNCT,
    OTHER,
}

impl Tag {
    pub const ALL: [Tag; 9] = [
        Tag::DT,
        Tag::JJ,
        Tag::NN,
        Tag::IN,
        Tag::VB,
        Tag::PRP,
        Tag::CC,
        Tag::PUNCT,
        Tag::OTHER,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::DT => "DT",
            Tag::JJ => "JJ",
            Tag::NN => "NN",
            Tag::IN => "IN",
            Tag::VB => "VB",
            Tag::PRP => "PRP",
            Tag::CC => "CC",
            Tag::PUNCT => "PUNCT",
            Tag::OTHER => "OTHER",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tag `{s}`")))
    }
}

/// Word lists and suffix rules driving the tagger.
#[derive(Debug, Clone)]
pub struct Lexicon {
    closed: HashMap<String, Tag>,
    adjectives: HashMap<String, ()>,
    suffixes: Vec<(String, Tag)>,
}

const DEFAULT: &str = include_str!("default_lexicon.txt");

impl Default for Lexicon {
    fn default() -> Self {
        Self::parse(DEFAULT).expect("built-in lexicon is valid")
    }
}

impl Lexicon {
    /// Parses the sectioned plain-text format (see `default_lexicon.txt`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut closed = HashMap::new();
        let mut adjectives = HashMap::new();
        let mut suffixes = Vec::new();
        let mut section: Option<String> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let line_no = lineno + 1;
            let err = |msg: String| Error::Lexicon { line: line_no, msg };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.to_string());
                continue;
            }
            let Some(sec) = section.as_deref() else {
                return Err(err("entry before any [section]".into()));
            };
            let word = line.to_lowercase();
            let closed_tag = match sec {
                "determiners" => Some(Tag::DT),
                "prepositions" => Some(Tag::IN),
                "pronouns" => Some(Tag::PRP),
                "conjunctions" => Some(Tag::CC),
                "verbs" => Some(Tag::VB),
                "other" => Some(Tag::OTHER),
                "adjectives" | "suffixes" => None,
                other => return Err(err(format!("unknown section [{other}]"))),
            };
            match (sec, closed_tag) {
                (_, Some(tag)) => {
                    if word.contains(char::is_whitespace) {
                        return Err(err(format!("`{word}` contains whitespace")));
                    }
                    if let Some(prev) = closed.insert(word.clone(), tag) {
                        return Err(err(format!("`{word}` already listed as {prev}")));
                    }
                }
                ("adjectives", None) => {
                    if let Some(prev) = closed.get(&word) {
                        return Err(err(format!("`{word}` already listed as {prev}")));
                    }
                    adjectives.insert(word, ());
                }
                _ => {
                    let mut parts = word.split_whitespace();
                    let (Some(suffix), Some(tag), None) = (parts.next(), parts.next(), parts.next())
                    else {
                        return Err(err("suffix rule must be `<suffix> <TAG>`".into()));
                    };
                    let tag: Tag = tag.to_uppercase().parse().map_err(|e: Error| err(e.to_string()))?;
                    suffixes.push((suffix.to_string(), tag));
                }
            }
        }
        for word in adjectives.keys() {
            if closed.contains_key(word) {
                return Err(Error::Lexicon {
                    line: 0,
                    msg: format!("`{word}` is both closed-class and adjective"),
                });
            }
        }
        Ok(Self {
            closed,
            adjectives,
            suffixes,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn closed_class(&self, word: &str) -> Option<Tag> {
        self.closed.get(word).copied()
    }

    pub fn is_adjective(&self, word: &str) -> bool {
        if self.adjectives.contains_key(word) {
            return true;
        }
        // Hyphenated compounds such as "red-and-white".
        word.contains('-')
            && word.split('-').all(|part| {
                self.adjectives.contains_key(part) || self.closed.get(part) == Some(&Tag::CC)
            })
            && word.split('-').any(|part| self.adjectives.contains_key(part))
    }

    pub fn suffix_tag(&self, word: &str) -> Option<Tag> {
        self.suffixes
            .iter()
            .find(|(suffix, _)| word.len() > suffix.len() && word.ends_with(suffix.as_str()))
            .map(|(_, t)| *t)
    }
}
