//! Speaker-conditioned pause insertion for TTS front-ends.
//!
//! The crate covers the whole pipeline: transcript normalization and subword
//! tokenization ([`textnorm`]), labeled-corpus construction from forced
//! alignment ([`corpus`]), Gaussian-mixture duration categories
//! ([`pausecat`]), a small reverse-mode differentiation core with the layers
//! the models need ([`nncore`]), the four model architectures ([`models`]),
//! training ([`trainkit`]), evaluation ([`evalkit`]), text annotation
//! ([`annotate`]) and synthetic corpora for controlled experiments
//! ([`synth`]).

pub mod annotate;
pub mod corpus;
pub mod evalkit;
pub mod models;
pub mod nncore;
pub mod pausecat;
pub mod synth;
pub mod textnorm;
pub mod trainkit;

pub use corpus::{AlignedWord, Alignment, CorpusStats, LabeledSentence, PauseEvent, PauseKind};
pub use pausecat::{DurationCategorizer, Gmm1D};
pub use textnorm::{Token, Vocabulary};
