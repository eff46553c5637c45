//! Tokenization and stopword handling shared by retrieval, matching and metrics.

use std::collections::HashSet;
use std::io;
use std::path::Path;

/// Splits text into word tokens.
pub trait Tokenizer: Send + Sync {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;
}

/// Whitespace splitting, with every CJK codepoint emitted as its own token.
///
/// Stands in for a proper Chinese word segmenter: exact-match lookups and
/// lexical overlap stay deterministic without any external model.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCjkTokenizer;

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F   // CJK symbols and punctuation
        | 0x3040..=0x30FF // kana
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF // hangul syllables
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF // full-width forms
        | 0x20000..=0x2FA1F)
}

impl Tokenizer for WhitespaceCjkTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut start = 0;
            for (i, c) in word.char_indices() {
                if is_cjk(c) {
                    if start < i {
                        out.push(&word[start..i]);
                    }
                    let end = i + c.len_utf8();
                    out.push(&word[i..end]);
                    start = end;
                }
            }
            if start < word.len() {
                out.push(&word[start..]);
            }
        }
        out
    }
}

/// Set of tokens ignored by persona matching and the rule judge.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    pub fn empty() -> Self {
        Self::default()
    }

    /// One token per line; blank lines are skipped.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for StopWords {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

/// Tokens of `text` with stopwords removed and duplicates dropped, first
/// occurrence order preserved.
pub fn content_tokens<'a>(
    tokenizer: &dyn Tokenizer,
    stopwords: &StopWords,
    text: &'a str,
) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    tokenizer
        .tokenize(text)
        .into_iter()
        .filter(|t| !stopwords.contains(t) && seen.insert(*t))
        .collect()
}
