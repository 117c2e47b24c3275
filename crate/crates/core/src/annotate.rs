//! Inserting pause marks into text.
//!
//! Marks follow the token they belong to: `sp1`, `sp2` or `sp3` for
//! categorized pauses, plain `sp` for models without category heads.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::PauseKind;
use crate::models::{decide, Decision, DecisionThresholds, ModelError, PauseModel};
use crate::textnorm::{tokenize_sentence, TextError, Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PauseMark {
    pub kind: PauseKind,
    pub category: Option<u8>,
}

impl fmt::Display for PauseMark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.category {
            Some(c) => write!(f, "sp{c}"),
            None => f.write_str("sp"),
        }
    }
}

/// A token and the pause placed after it, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedToken {
    /// Canonical token text (continuation pieces keep their `##`).
    pub text: String,
    pub pause_after: Option<PauseMark>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Attaches decisions to tokens. An RP after the last word of the sentence
/// is dropped because no word follows it.
pub fn apply_decisions(tokens: &[Token], decisions: &[Option<Decision>]) -> Vec<AnnotatedToken> {
    let last_word = tokens.iter().rposition(|t| !t.is_punct);
    tokens
        .iter()
        .zip(decisions)
        .enumerate()
        .map(|(i, (tok, d))| {
            let pause_after = d
                .filter(|d| !(d.kind == PauseKind::Rp && Some(i) == last_word))
                .map(|d| PauseMark { kind: d.kind, category: d.category });
            AnnotatedToken { text: tok.canonical(), pause_after }
        })
        .collect()
}

/// Tokenizes, predicts and decides for one line of text.
pub fn annotate(
    text: &str,
    speaker: Option<&str>,
    model: &PauseModel,
    vocab: &Vocabulary,
    thresholds: DecisionThresholds,
) -> Result<Vec<AnnotatedToken>, AnnotateError> {
    let tokens = tokenize_sentence(text, vocab)?;
    let output = model.predict_tokens(vocab, &tokens, speaker)?;
    let decisions = decide(&output, &tokens, thresholds)?;
    Ok(apply_decisions(&tokens, &decisions))
}

/// One line: subwords re-joined into words, marks inline after the word or
/// punctuation mark they follow.
pub fn render(tokens: &[AnnotatedToken]) -> String {
    let mut parts: Vec<String> = Vec::new();
    for t in tokens {
        match t.text.strip_prefix("##") {
            Some(rest) if !parts.is_empty() => parts.last_mut().expect("non-empty").push_str(rest),
            _ => parts.push(t.text.clone()),
        }
        if let Some(mark) = t.pause_after {
            parts.push(mark.to_string());
        }
    }
    parts.join(" ")
}
