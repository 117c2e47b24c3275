//! Transcript normalization and greedy longest-match subword tokenization.
//!
//! Words are lowercased, punctuation is split off into standalone units and
//! any run of consecutive punctuation units keeps only its first mark. Words
//! are then split into subwords against a [`Vocabulary`]; continuation pieces
//! carry the `##` prefix in their canonical text form.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Characters treated as punctuation. Hyphens stay inside words.
pub const PUNCTUATION: [char; 10] = ['.', ',', ';', ':', '!', '?', '"', '\'', '(', ')'];

/// Prefix marking a continuation subword.
pub const CONTINUATION_PREFIX: &str = "##";

pub const DEFAULT_UNK: &str = "[UNK]";
pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("sentence is empty after normalization")]
    EmptySentence,
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("duplicate vocabulary entry {0:?} on line {1}")]
    DuplicateEntry(String, usize),
    #[error("cannot read vocabulary {path}: {reason}")]
    Io { path: String, reason: String },
}

pub fn is_punctuation(c: char) -> bool {
    PUNCTUATION.contains(&c)
}

/// One unit of a normalized sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unit {
    Word(String),
    Punct(char),
}

impl Unit {
    pub fn is_punct(&self) -> bool {
        matches!(self, Unit::Punct(_))
    }

    pub fn text(&self) -> String {
        match self {
            Unit::Word(w) => w.clone(),
            Unit::Punct(c) => c.to_string(),
        }
    }
}

/// Lowercases `raw`, splits punctuation off words and collapses punctuation
/// runs to their first mark. Whitespace between marks does not break a run.
pub fn normalize_sentence(raw: &str) -> Result<Vec<Unit>, TextError> {
    let mut units: Vec<Unit> = Vec::new();
    let mut word = String::new();

    let flush = |word: &mut String, units: &mut Vec<Unit>| {
        if !word.is_empty() {
            units.push(Unit::Word(std::mem::take(word)));
        }
    };

    for c in raw.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut units);
        } else if is_punctuation(c) {
            flush(&mut word, &mut units);
            if !matches!(units.last(), Some(Unit::Punct(_))) {
                units.push(Unit::Punct(c));
            }
        } else {
            word.extend(c.to_lowercase());
        }
    }
    flush(&mut word, &mut units);

    if units.is_empty() {
        return Err(TextError::EmptySentence);
    }
    Ok(units)
}

/// A subword or punctuation token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    /// Piece text without the `##` prefix.
    pub text: String,
    pub is_continuation: bool,
    pub is_punct: bool,
    /// Index of the source unit (word or punctuation mark) in the sentence.
    pub word_index: usize,
    pub is_word_final: bool,
}

impl Token {
    pub fn punct(mark: char, word_index: usize) -> Self {
        Token {
            text: mark.to_string(),
            is_continuation: false,
            is_punct: true,
            word_index,
            is_word_final: true,
        }
    }

    /// Text form with the `##` prefix on continuation pieces.
    pub fn canonical(&self) -> String {
        if self.is_continuation {
            format!("{CONTINUATION_PREFIX}{}", self.text)
        } else {
            self.text.clone()
        }
    }

    /// Word-final, non-punctuation: the only positions that may carry an RP.
    pub fn rp_eligible(&self) -> bool {
        self.is_word_final && !self.is_punct
    }

    pub fn pip_eligible(&self) -> bool {
        self.is_punct
    }
}

/// Subword vocabulary. Entry order defines token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, usize>,
    unk_token: String,
    pub max_word_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary; `[UNK]` is appended when no unk entry is present.
    pub fn new<I, S>(entries: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for (line, entry) in entries.into_iter().enumerate() {
            let entry: String = entry.into();
            if index.insert(entry.clone(), list.len()).is_some() {
                return Err(TextError::DuplicateEntry(entry, line + 1));
            }
            list.push(entry);
        }
        if list.is_empty() {
            return Err(TextError::EmptyVocabulary);
        }
        let unk_token = if index.contains_key(DEFAULT_UNK) {
            DEFAULT_UNK.to_string()
        } else if list[0].starts_with('[') && list[0].ends_with(']') {
            list[0].clone()
        } else {
            index.insert(DEFAULT_UNK.to_string(), list.len());
            list.push(DEFAULT_UNK.to_string());
            DEFAULT_UNK.to_string()
        };
        Ok(Vocabulary {
            entries: list,
            index,
            unk_token,
            max_word_chars: DEFAULT_MAX_WORD_CHARS,
        })
    }

    /// Parses the plain-text format: one entry per line, blank lines skipped.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TextError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.entries.join("\n");
        out.push('\n');
        out
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unk_token(&self) -> &str {
        &self.unk_token
    }

    pub fn contains(&self, entry: &str) -> bool {
        self.index.contains_key(entry)
    }

    pub fn id(&self, entry: &str) -> Option<usize> {
        self.index.get(entry).copied()
    }

    pub fn unk_id(&self) -> usize {
        self.index[&self.unk_token]
    }

    /// Id of a token's canonical form, falling back to the unk id.
    pub fn token_id(&self, token: &Token) -> usize {
        self.id(&token.canonical()).unwrap_or_else(|| self.unk_id())
    }
}

/// Greedy longest-match subwording of one normalized word.
///
/// If any position has no matching piece, or the word is longer than
/// `max_word_chars`, the whole word becomes a single unk token.
pub fn wordpiece_tokenize(word: &str, vocab: &Vocabulary, word_index: usize) -> Vec<Token> {
    let chars: Vec<char> = word.chars().collect();
    let unk = || {
        vec![Token {
            text: vocab.unk_token().to_string(),
            is_continuation: false,
            is_punct: false,
            word_index,
            is_word_final: true,
        }]
    };
    if chars.is_empty() || chars.len() > vocab.max_word_chars {
        return unk();
    }

    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let sub: String = chars[start..end].iter().collect();
            let key = if start > 0 {
                format!("{CONTINUATION_PREFIX}{sub}")
            } else {
                sub.clone()
            };
            if vocab.contains(&key) {
                found = Some(sub);
                break;
            }
            end -= 1;
        }
        match found {
            Some(sub) => {
                pieces.push(Token {
                    text: sub,
                    is_continuation: start > 0,
                    is_punct: false,
                    word_index,
                    is_word_final: false,
                });
                start = end;
            }
            None => return unk(),
        }
    }
    if let Some(last) = pieces.last_mut() {
        last.is_word_final = true;
    }
    pieces
}

/// Tokenizes already-normalized units.
pub fn tokenize_units(units: &[Unit], vocab: &Vocabulary) -> Vec<Token> {
    let mut tokens = Vec::new();
    for (index, unit) in units.iter().enumerate() {
        match unit {
            Unit::Word(w) => tokens.extend(wordpiece_tokenize(w, vocab, index)),
            Unit::Punct(c) => tokens.push(Token::punct(*c, index)),
        }
    }
    tokens
}

pub fn tokenize_sentence(raw: &str, vocab: &Vocabulary) -> Result<Vec<Token>, TextError> {
    let units = normalize_sentence(raw)?;
    Ok(tokenize_units(&units, vocab))
}

/// Serialized token form used by dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    #[serde(default)]
    pub cont: bool,
    #[serde(default)]
    pub punct: bool,
}

impl From<&Token> for TokenRecord {
    fn from(t: &Token) -> Self {
        TokenRecord {
            text: t.text.clone(),
            cont: t.is_continuation,
            punct: t.is_punct,
        }
    }
}

/// Rebuilds word indices and word-final flags from token flags.
pub fn tokens_from_records(records: &[TokenRecord]) -> Vec<Token> {
    let mut tokens: Vec<Token> = Vec::with_capacity(records.len());
    let mut word_index = 0usize;
    for (i, r) in records.iter().enumerate() {
        if i > 0 && !r.cont {
            word_index += 1;
        }
        let next_continues = records
            .get(i + 1)
            .map(|n| n.cont && !n.punct)
            .unwrap_or(false);
        tokens.push(Token {
            text: r.text.clone(),
            is_continuation: r.cont && !r.punct,
            is_punct: r.punct,
            word_index,
            is_word_final: r.punct || !next_continues,
        });
    }
    tokens
}
