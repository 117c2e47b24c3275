//! Labeled-corpus construction from word-level forced-alignment timing.
//!
//! An alignment file looks like this:
//!
//! ```text
//! #speaker<TAB>spk01
//! #text<TAB>He said, "Wait!"
//! he<TAB>120<TAB>300
//! said<TAB>310<TAB>650
//! wait<TAB>900<TAB>1300
//! ```
//!
//! Silences longer than 30 ms at a punctuation mark become PIPs, silences
//! longer than 50 ms at a word transition without punctuation become RPs.
//! Both thresholds are strict.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pausecat::{CategoryError, DurationCategorizer};
use crate::textnorm::{
    normalize_sentence, tokenize_units, tokens_from_records, TextError, Token, TokenRecord, Unit,
    Vocabulary,
};

pub const PIP_MIN_GAP_MS: u32 = 30;
pub const RP_MIN_GAP_MS: u32 = 50;

pub const DATASET_FORMAT: &str = "pausekit-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("alignment mismatch at spoken word {index}: expected {expected:?}, found {found:?}")]
    AlignmentMismatch {
        index: usize,
        expected: Option<String>,
        found: Option<String>,
    },
    #[error("inconsistent pause event after word {word}: {reason}")]
    Inconsistent { word: usize, reason: String },
    #[error("dataset version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("dataset line {line}: malformed record: {reason}")]
    Record { line: usize, reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Category(#[from] CategoryError),
}

fn io_err(path: &Path, e: impl ToString) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedWord {
    pub word: String,
    pub start_ms: u32,
    pub end_ms: u32,
}

/// Parsed contents of one alignment file.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub speaker: String,
    pub transcript: String,
    pub words: Vec<AlignedWord>,
}

impl Alignment {
    /// Serializes in the alignment file format read by [`parse_alignment`].
    pub fn to_text(&self) -> String {
        let mut out = format!("#speaker\t{}\n#text\t{}\n", self.speaker, self.transcript);
        for w in &self.words {
            out.push_str(&format!("{}\t{}\t{}\n", w.word, w.start_ms, w.end_ms));
        }
        out
    }
}

fn header_field<'a>(line: Option<(usize, &'a str)>, key: &str) -> Result<&'a str, CorpusError> {
    let (no, line) = line.ok_or(CorpusError::Parse {
        line: if key == "#speaker" { 1 } else { 2 },
        reason: format!("missing {key} header"),
    })?;
    match line.split_once('\t') {
        Some((k, v)) if k == key && !v.trim().is_empty() => Ok(v.trim()),
        _ => Err(CorpusError::Parse {
            line: no,
            reason: format!("expected \"{key}<TAB>value\""),
        }),
    }
}

pub fn parse_alignment(text: &str) -> Result<Alignment, CorpusError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let speaker = header_field(lines.next(), "#speaker")?.to_string();
    let transcript = header_field(lines.next(), "#text")?.to_string();

    let mut words: Vec<AlignedWord> = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CorpusError::Parse {
                line: no,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| {
            s.trim().parse::<u32>().map_err(|_| CorpusError::Parse {
                line: no,
                reason: format!("invalid {what} {s:?}"),
            })
        };
        let start_ms = num(fields[1], "start_ms")?;
        let end_ms = num(fields[2], "end_ms")?;
        if end_ms <= start_ms {
            return Err(CorpusError::Parse {
                line: no,
                reason: format!("end_ms {end_ms} is not after start_ms {start_ms}"),
            });
        }
        if let Some(prev) = words.last() {
            if start_ms < prev.end_ms {
                return Err(CorpusError::Parse {
                    line: no,
                    reason: format!("start_ms {start_ms} overlaps previous word ending at {}", prev.end_ms),
                });
            }
        }
        let word = fields[0].trim().to_lowercase();
        if word.is_empty() {
            return Err(CorpusError::Parse {
                line: no,
                reason: "empty word".into(),
            });
        }
        words.push(AlignedWord {
            word,
            start_ms,
            end_ms,
        });
    }
    if words.is_empty() {
        return Err(CorpusError::Parse {
            line: 3,
            reason: "no word rows".into(),
        });
    }
    Ok(Alignment {
        speaker,
        transcript,
        words,
    })
}

pub fn read_alignment_file(path: impl AsRef<Path>) -> Result<Alignment, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_alignment(&text)
}

/// Matches spoken words 1:1 and in order against the transcript's
/// normalized words. Returns, for each spoken word, whether punctuation
/// follows it in the transcript.
pub fn match_transcript(units: &[Unit], words: &[AlignedWord]) -> Result<Vec<bool>, CorpusError> {
    let word_units: Vec<(usize, &str)> = units
        .iter()
        .enumerate()
        .filter_map(|(i, u)| match u {
            Unit::Word(w) => Some((i, w.as_str())),
            Unit::Punct(_) => None,
        })
        .collect();
    let n = word_units.len().max(words.len());
    for k in 0..n {
        let expected = word_units.get(k).map(|(_, w)| *w);
        let found = words.get(k).map(|w| w.word.as_str());
        if expected != found {
            return Err(CorpusError::AlignmentMismatch {
                index: k,
                expected: expected.map(str::to_string),
                found: found.map(str::to_string),
            });
        }
    }
    Ok(word_units
        .iter()
        .map(|(i, _)| matches!(units.get(i + 1), Some(Unit::Punct(_))))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PauseKind {
    Rp,
    Pip,
}

/// An uncategorized pause after spoken word `after_word_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PauseEvent {
    pub after_word_index: usize,
    pub duration_ms: u32,
    pub kind: PauseKind,
}

pub fn extract_pauses(words: &[AlignedWord], punct_after: &[bool]) -> Vec<PauseEvent> {
    words
        .windows(2)
        .enumerate()
        .filter_map(|(k, pair)| {
            let gap = pair[1].start_ms.saturating_sub(pair[0].end_ms);
            let punct = punct_after.get(k).copied().unwrap_or(false);
            let kind = match (punct, gap) {
                (true, g) if g > PIP_MIN_GAP_MS => PauseKind::Pip,
                (false, g) if g > RP_MIN_GAP_MS => PauseKind::Rp,
                _ => return None,
            };
            Some(PauseEvent {
                after_word_index: k,
                duration_ms: gap,
                kind,
            })
        })
        .collect()
}

/// A tokenized sentence with its four parallel label vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSentence {
    pub id: String,
    pub speaker: String,
    pub tokens: Vec<Token>,
    pub p_rp: Vec<u8>,
    pub c_rp: Vec<u8>,
    pub p_pip: Vec<u8>,
    pub c_pip: Vec<u8>,
}

impl LabeledSentence {
    pub fn unlabeled(id: impl Into<String>, speaker: impl Into<String>, tokens: Vec<Token>) -> Self {
        let n = tokens.len();
        LabeledSentence {
            id: id.into(),
            speaker: speaker.into(),
            tokens,
            p_rp: vec![0; n],
            c_rp: vec![0; n],
            p_pip: vec![0; n],
            c_pip: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the label-position invariants.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.tokens.len();
        for (name, v) in [("p_rp", &self.p_rp), ("c_rp", &self.c_rp), ("p_pip", &self.p_pip), ("c_pip", &self.c_pip)] {
            if v.len() != n {
                return Err(format!("{name} has length {}, expected {n}", v.len()));
            }
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if self.p_rp[i] > 1 || self.p_pip[i] > 1 || self.c_rp[i] > 3 || self.c_pip[i] > 3 {
                return Err(format!("label out of range at token {i}"));
            }
            if self.p_rp[i] == 1 && !t.rp_eligible() {
                return Err(format!("RP on ineligible token {i} ({})", t.canonical()));
            }
            if self.p_pip[i] == 1 && !t.pip_eligible() {
                return Err(format!("PIP on non-punctuation token {i}"));
            }
            if (self.c_rp[i] != 0) != (self.p_rp[i] == 1) {
                return Err(format!("c_rp/p_rp disagree at token {i}"));
            }
            if (self.c_pip[i] != 0) != (self.p_pip[i] == 1) {
                return Err(format!("c_pip/p_pip disagree at token {i}"));
            }
        }
        Ok(())
    }
}

/// Places categorized events on the token sequence.
///
/// RPs land on the word-final subword of the word before the gap; PIPs land
/// on the punctuation token that follows that word.
pub fn build_labels(
    id: &str,
    speaker: &str,
    tokens: Vec<Token>,
    events: &[PauseEvent],
    categorizer: &DurationCategorizer,
) -> Result<LabeledSentence, CorpusError> {
    // unit index of each spoken word, in order
    let mut word_units: Vec<usize> = Vec::new();
    for t in &tokens {
        if !t.is_punct && word_units.last() != Some(&t.word_index) {
            word_units.push(t.word_index);
        }
    }
    let mut labeled = LabeledSentence::unlabeled(id, speaker, tokens);
    for ev in events {
        let inconsistent = |reason: &str| CorpusError::Inconsistent {
            word: ev.after_word_index,
            reason: reason.to_string(),
        };
        let unit = *word_units
            .get(ev.after_word_index)
            .ok_or_else(|| inconsistent("no such word"))?;
        let next = labeled.tokens.iter().position(|t| t.word_index == unit + 1);
        let next_is_punct = next.map(|i| labeled.tokens[i].is_punct);
        let category = categorizer.categorize(ev.duration_ms)?;
        match ev.kind {
            PauseKind::Rp => {
                if next_is_punct != Some(false) {
                    return Err(inconsistent("RP must be followed by a word"));
                }
                let pos = labeled
                    .tokens
                    .iter()
                    .rposition(|t| t.word_index == unit && t.is_word_final)
                    .ok_or_else(|| inconsistent("word has no final subword"))?;
                labeled.p_rp[pos] = 1;
                labeled.c_rp[pos] = category;
            }
            PauseKind::Pip => {
                let pos = match (next, next_is_punct) {
                    (Some(i), Some(true)) => i,
                    _ => return Err(inconsistent("PIP must be followed by punctuation")),
                };
                labeled.p_pip[pos] = 1;
                labeled.c_pip[pos] = category;
            }
        }
    }
    Ok(labeled)
}

/// Full ingestion of one parsed alignment.
pub fn label_alignment(
    id: &str,
    alignment: &Alignment,
    vocab: &Vocabulary,
    categorizer: &DurationCategorizer,
) -> Result<LabeledSentence, CorpusError> {
    let units = normalize_sentence(&alignment.transcript)?;
    let punct_after = match_transcript(&units, &alignment.words)?;
    let events = extract_pauses(&alignment.words, &punct_after);
    let tokens = tokenize_units(&units, vocab);
    build_labels(id, &alignment.speaker, tokens, &events, categorizer)
}

/// Durations of all RPs and PIPs in an alignment, pooled.
pub fn pause_durations(alignment: &Alignment) -> Result<Vec<PauseEvent>, CorpusError> {
    let units = normalize_sentence(&alignment.transcript)?;
    let punct_after = match_transcript(&units, &alignment.words)?;
    Ok(extract_pauses(&alignment.words, &punct_after))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    pub punctuation: usize,
    pub speakers: usize,
    pub rp_counts: [usize; 3],
    pub pip_counts: [usize; 3],
    pub rp_total: usize,
    pub pip_total: usize,
}

pub fn compute_stats(dataset: &[LabeledSentence]) -> CorpusStats {
    let mut stats = CorpusStats {
        sentences: dataset.len(),
        ..Default::default()
    };
    let mut speakers = BTreeSet::new();
    for s in dataset {
        speakers.insert(s.speaker.as_str());
        stats.tokens += s.tokens.len();
        stats.punctuation += s.tokens.iter().filter(|t| t.is_punct).count();
        for &c in s.c_rp.iter().filter(|&&c| c > 0) {
            stats.rp_counts[c as usize - 1] += 1;
        }
        for &c in s.c_pip.iter().filter(|&&c| c > 0) {
            stats.pip_counts[c as usize - 1] += 1;
        }
    }
    stats.speakers = speakers.len();
    stats.rp_total = stats.rp_counts.iter().sum();
    stats.pip_total = stats.pip_counts.iter().sum();
    stats
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct SentenceRecord {
    id: String,
    speaker: String,
    tokens: Vec<TokenRecord>,
    p_rp: Vec<u8>,
    c_rp: Vec<u8>,
    p_pip: Vec<u8>,
    c_pip: Vec<u8>,
}

pub fn write_dataset_to(mut out: impl Write, dataset: &[LabeledSentence]) -> std::io::Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for s in dataset {
        let rec = SentenceRecord {
            id: s.id.clone(),
            speaker: s.speaker.clone(),
            tokens: s.tokens.iter().map(TokenRecord::from).collect(),
            p_rp: s.p_rp.clone(),
            c_rp: s.c_rp.clone(),
            p_pip: s.p_pip.clone(),
            c_pip: s.c_pip.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &[LabeledSentence]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_dataset_to(BufWriter::new(file), dataset).map_err(|e| io_err(path, e))
}

pub fn read_dataset_from(input: impl BufRead) -> Result<Vec<LabeledSentence>, CorpusError> {
    let mut lines = input.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, l)) => l.map_err(|e| CorpusError::Record { line: 1, reason: e.to_string() })?,
        None => return Err(CorpusError::Record { line: 1, reason: "missing header".into() }),
    };
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| CorpusError::Record { line: 1, reason: format!("bad header: {e}") })?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(CorpusError::Version {
            expected: format!("{DATASET_FORMAT} v{DATASET_VERSION}"),
            found: format!("{} v{}", header.format, header.version),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let no = i + 1;
        let line = line.map_err(|e| CorpusError::Record { line: no, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SentenceRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Record { line: no, reason: e.to_string() })?;
        let sentence = LabeledSentence {
            id: rec.id,
            speaker: rec.speaker,
            tokens: tokens_from_records(&rec.tokens),
            p_rp: rec.p_rp,
            c_rp: rec.c_rp,
            p_pip: rec.p_pip,
            c_pip: rec.c_pip,
        };
        sentence
            .validate()
            .map_err(|reason| CorpusError::Record { line: no, reason })?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_dataset_from(BufReader::new(file))
}
