//! Token vocabulary and caption token sequences.

use std::collections::HashMap;

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, removes ASCII punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("line {line}: duplicate token {token:?}")]
    Duplicate { line: usize, token: String },
    #[error("line {line}: expected reserved token {expected:?}, found {found:?}")]
    MissingReserved {
        line: usize,
        expected: &'static str,
        found: String,
    },
    #[error("line {line}: empty or whitespace-bearing token {token:?}")]
    BadToken { line: usize, token: String },
    #[error("token id {id} out of range for vocabulary of {len}")]
    OutOfRange { id: usize, len: usize },
}

/// Ordered unique tokens; indices 0..4 are the reserved markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from the full ordered token list, reserved prefix included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        for (line, expected) in RESERVED.iter().enumerate() {
            let found = tokens.get(line).cloned().unwrap_or_default();
            if found != *expected {
                return Err(VocabError::MissingReserved {
                    line,
                    expected,
                    found,
                });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (line, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(VocabError::BadToken {
                    line,
                    token: t.clone(),
                });
            }
            if index.insert(t.clone(), line).is_some() {
                return Err(VocabError::Duplicate {
                    line,
                    token: t.clone(),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by `words` (deduplicated, first occurrence wins).
    pub fn with_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.as_ref();
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("reserved prefix and unique tokens")
    }

    /// Vocabulary over every token of `captions`, most frequent first, ties
    /// broken alphabetically.
    pub fn from_corpus<'a, I>(captions: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for cap in captions {
            for t in cap {
                if !RESERVED.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::with_words(words.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str, VocabError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(VocabError::OutOfRange {
                id,
                len: self.tokens.len(),
            })
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id_or_unk(w.as_ref())).collect()
    }

    /// Space-joined content tokens; reserved markers are skipped.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= UNK)
            .filter_map(|&i| self.tokens.get(i).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptionError {
    #[error("caption has no content tokens")]
    Empty,
    #[error("caption has {len} content tokens, limit is {max}")]
    TooLong { len: usize, max: usize },
    #[error("reserved marker {id} inside caption content at position {pos}")]
    Marker { id: usize, pos: usize },
    #[error("token sequence must start with <bos> and end with <eos>")]
    Delimiters,
}

/// Content tokens of one caption. The full sequence is `<bos>`, content,
/// `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Caption {
    content: Vec<usize>,
}

impl Caption {
    /// A reference caption: 1..=max_len content tokens, none of them
    /// `<pad>`, `<bos>` or `<eos>`.
    pub fn new(content: Vec<usize>, max_len: usize) -> Result<Self, CaptionError> {
        if content.is_empty() {
            return Err(CaptionError::Empty);
        }
        if content.len() > max_len {
            return Err(CaptionError::TooLong {
                len: content.len(),
                max: max_len,
            });
        }
        Self::check_markers(&content)?;
        Ok(Self { content })
    }

    /// A decoder output; may be empty (see [`Caption::is_degenerate`]).
    pub fn generated(content: Vec<usize>) -> Result<Self, CaptionError> {
        Self::check_markers(&content)?;
        Ok(Self { content })
    }

    /// Parses a full `<bos> … <eos>` sequence.
    pub fn from_token_ids(ids: &[usize], max_len: usize) -> Result<Self, CaptionError> {
        match ids {
            [BOS, content @ .., EOS] => Self::new(content.to_vec(), max_len),
            _ => Err(CaptionError::Delimiters),
        }
    }

    fn check_markers(content: &[usize]) -> Result<(), CaptionError> {
        match content.iter().position(|&t| t == PAD || t == BOS || t == EOS) {
            Some(pos) => Err(CaptionError::Marker {
                id: content[pos],
                pos,
            }),
            None => Ok(()),
        }
    }

    pub fn content(&self) -> &[usize] {
        &self.content
    }

    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }

    /// Generated caption that ended before emitting any word.
    pub fn is_degenerate(&self) -> bool {
        self.content.is_empty()
    }

    pub fn token_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.content.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(&self.content);
        ids.push(EOS);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owned(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer_rule() {
        assert_eq!(tokenize("A Man, riding\ta horse!"), owned(&["a", "man", "riding", "a", "horse"]));
        assert_eq!(tokenize("  ...  "), Vec::<String>::new());
        assert_eq!(tokenize("don't"), owned(&["dont"]));
    }

    #[test]
    fn reserved_only_vocab_has_four_tokens() {
        let v = Vocabulary::from_tokens(owned(&RESERVED)).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn duplicate_reports_line() {
        let err = Vocabulary::from_tokens(owned(&[
            "<pad>", "<bos>", "<eos>", "<unk>", "a", "b", "a",
        ]))
        .unwrap_err();
        assert_eq!(
            err,
            VocabError::Duplicate {
                line: 6,
                token: "a".into()
            }
        );
    }

    #[test]
    fn missing_reserved_prefix() {
        let err = Vocabulary::from_tokens(owned(&["<pad>", "<eos>", "<bos>", "<unk>"])).unwrap_err();
        assert!(matches!(err, VocabError::MissingReserved { line: 1, .. }));
    }

    #[test]
    fn corpus_order_is_frequency_then_alphabetical() {
        let caps = [owned(&["b", "a", "c"]), owned(&["c", "a"])];
        let v = Vocabulary::from_corpus(caps.iter().map(|c| c.as_slice()));
        assert_eq!(&v.tokens()[4..], &owned(&["a", "c", "b"])[..]);
        assert_eq!(v.encode(&["a", "zzz"]), vec![4, UNK]);
    }

    #[test]
    fn caption_invariants() {
        let c = Caption::new(vec![4, 5], 19).unwrap();
        assert_eq!(c.token_ids(), vec![BOS, 4, 5, EOS]);
        assert_eq!(Caption::from_token_ids(&[BOS, 4, 5, EOS], 19).unwrap(), c);
        assert_eq!(Caption::new(vec![], 19), Err(CaptionError::Empty));
        assert!(matches!(
            Caption::new(vec![4; 20], 19),
            Err(CaptionError::TooLong { len: 20, max: 19 })
        ));
        assert!(matches!(
            Caption::new(vec![4, EOS, 5], 19),
            Err(CaptionError::Marker { id: EOS, pos: 1 })
        ));
        assert_eq!(
            Caption::from_token_ids(&[4, 5, EOS], 19),
            Err(CaptionError::Delimiters)
        );
        assert!(Caption::generated(vec![]).unwrap().is_degenerate());
    }
}
