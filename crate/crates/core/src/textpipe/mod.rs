//! Rule-based language front end: tokenization, tagging, noun-phrase
//! chunking and vocabulary encoding.

mod lexicon;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use lexicon::{Lexicon, Tag};
pub use vocab::{build_vocab, Vocab, END, START, UNK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedToken {
    pub surface: String,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhraseKind {
    /// Adjective noun phrase, `DT? JJ+ NN+`.
    JNP,
    /// Two noun groups joined by a preposition.
    PNP,
}

impl fmt::Display for PhraseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhraseKind::JNP => "JNP",
            PhraseKind::PNP => "PNP",
        })
    }
}

impl std::str::FromStr for PhraseKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "JNP" => Ok(PhraseKind::JNP),
            "PNP" => Ok(PhraseKind::PNP),
            _ => Err(crate::Error::InvalidArgument(format!("unknown phrase kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub tokens: Vec<TaggedToken>,
    pub kind: PhraseKind,
    /// Half-open token range in the parent description.
    pub span: (usize, usize),
}

impl Phrase {
    pub fn text(&self) -> String {
        self.words().collect::<Vec<_>>().join(" ")
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Lowercases, splits on whitespace and separates punctuation into its own
/// tokens. Hyphens and apostrophes between letters stay inside the word.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let joiner = (c == '-' || c == '\'')
                && i > 0
                && is_word_char(chars[i - 1])
                && chars.get(i + 1).is_some_and(|&n| is_word_char(n));
            if is_word_char(c) || joiner {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Tags each token: closed-class lexicon, then adjective lexicon, then
/// suffix rules, then `NN`.
pub fn pos_tag(tokens: &[String], lexicon: &Lexicon) -> Vec<TaggedToken> {
    tokens
        .iter()
        .map(|tok| TaggedToken {
            surface: tok.clone(),
            tag: tag_word(tok, lexicon),
        })
        .collect()
}

fn tag_word(word: &str, lexicon: &Lexicon) -> Tag {
    if !word.chars().any(is_word_char) {
        return Tag::PUNCT;
    }
    if word.chars().all(|c| c.is_ascii_digit()) {
        return Tag::OTHER;
    }
    if let Some(tag) = lexicon.closed_class(word) {
        return tag;
    }
    if lexicon.is_adjective(word) {
        return Tag::JJ;
    }
    lexicon.suffix_tag(word).unwrap_or(Tag::NN)
}

fn take_while_tag(tags: &[Tag], mut i: usize, tag: Tag) -> usize {
    while i < tags.len() && tags[i] == tag {
        i += 1;
    }
    i
}

fn skip_optional(tags: &[Tag], i: usize, tag: Tag) -> usize {
    if tags.get(i) == Some(&tag) {
        i + 1
    } else {
        i
    }
}

/// `DT? JJ* NN+`, returning the end index.
fn noun_group(tags: &[Tag], start: usize) -> Option<usize> {
    let i = skip_optional(tags, start, Tag::DT);
    let i = take_while_tag(tags, i, Tag::JJ);
    let end = take_while_tag(tags, i, Tag::NN);
    (end > i).then_some(end)
}

fn match_pnp(tags: &[Tag], start: usize) -> Option<usize> {
    let first = noun_group(tags, start)?;
    if tags.get(first) != Some(&Tag::IN) {
        return None;
    }
    noun_group(tags, first + 1)
}

fn match_jnp(tags: &[Tag], start: usize) -> Option<usize> {
    let i = skip_optional(tags, start, Tag::DT);
    let nouns = take_while_tag(tags, i, Tag::JJ);
    if nouns == i {
        return None;
    }
    let end = take_while_tag(tags, nouns, Tag::NN);
    (end > nouns).then_some(end)
}

/// Longest non-overlapping phrases, scanned left to right; a PNP match is
/// preferred over a JNP match at the same start.
pub fn chunk_phrases(tagged: &[TaggedToken]) -> Vec<Phrase> {
    let tags: Vec<Tag> = tagged.iter().map(|t| t.tag).collect();
    let mut phrases = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let found = match_pnp(&tags, i)
            .map(|e| (e, PhraseKind::PNP))
            .or_else(|| match_jnp(&tags, i).map(|e| (e, PhraseKind::JNP)));
        match found {
            Some((end, kind)) => {
                phrases.push(Phrase {
                    tokens: tagged[i..end].to_vec(),
                    kind,
                    span: (i, end),
                });
                i = end;
            }
            None => i += 1,
        }
    }
    phrases
}

/// Tokenize, tag and chunk in one go.
pub fn extract_phrases(text: &str, lexicon: &Lexicon) -> Vec<Phrase> {
    chunk_phrases(&pos_tag(&tokenize(text), lexicon))
}

/// One output line for the `phrases` command: phrase text and kind,
/// tab-separated, for every extracted phrase.
pub fn format_phrase_line(phrases: &[Phrase]) -> String {
    phrases
        .iter()
        .map(|p| format!("{}\t{}", p.text(), p.kind))
        .collect::<Vec<_>>()
        .join("\t")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    fn tags_of(words: &[&str]) -> Vec<Tag> {
        pos_tag(&toks(words), &Lexicon::default())
            .into_iter()
            .map(|t| t.tag)
            .collect()
    }

    fn tagged(tags: &[Tag]) -> Vec<TaggedToken> {
        tags.iter()
            .enumerate()
            .map(|(i, &tag)| TaggedToken {
                surface: format!("w{i}"),
                tag,
            })
            .collect()
    }

    #[test]
    fn tokenize_sentence() {
        assert_eq!(
            tokenize("The man wears a blue shirt."),
            toks(&["the", "man", "wears", "a", "blue", "shirt", "."])
        );
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \n").is_empty());
    }

    #[test]
    fn tokenize_keeps_hyphenated_words() {
        assert_eq!(tokenize("red-and-white bag"), toks(&["red-and-white", "bag"]));
        assert_eq!(tokenize("-bag-"), toks(&["-", "bag", "-"]));
    }

    #[test]
    fn tag_examples() {
        use Tag::*;
        assert_eq!(tags_of(&["a", "blue", "shirt"]), vec![DT, JJ, NN]);
        assert_eq!(tags_of(&["pair", "of", "shoes"]), vec![NN, IN, NN]);
        assert_eq!(tags_of(&["."]), vec![PUNCT]);
        assert_eq!(tags_of(&["walks", "quickly"]), vec![VB, OTHER]);
        assert_eq!(tags_of(&["42"]), vec![OTHER]);
    }

    #[test]
    fn chunk_jnp() {
        use Tag::*;
        let p = chunk_phrases(&tagged(&[DT, JJ, NN]));
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].kind, p[0].span), (PhraseKind::JNP, (0, 3)));
    }

    #[test]
    fn chunk_pnp() {
        use Tag::*;
        let p = chunk_phrases(&tagged(&[DT, NN, IN, JJ, NN]));
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].kind, p[0].span), (PhraseKind::PNP, (0, 5)));
    }

    #[test]
    fn chunk_nothing_without_nouns() {
        assert!(chunk_phrases(&tagged(&[Tag::VB, Tag::OTHER])).is_empty());
    }

    #[test]
    fn bare_noun_group_is_not_a_phrase() {
        use Tag::*;
        assert!(chunk_phrases(&tagged(&[DT, NN, VB])).is_empty());
    }

    #[test]
    fn phrase_line_format() {
        let lex = Lexicon::default();
        let p = extract_phrases("the man wears a blue shirt", &lex);
        assert_eq!(format_phrase_line(&p), "a blue shirt\tJNP");
    }
}
