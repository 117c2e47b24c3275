//! Synthetic multi-speaker corpora with known pause labels.
//!
//! Sentences come from a small phrase-structure grammar over a fixed
//! lexicon. Every speaker follows a deterministic RP rule and fixed
//! categories, and word timings are laid out so that the alignment
//! ingestion pipeline recovers exactly the intended labels. Different
//! speakers can be given contradictory rules, which makes the speaker the
//! only way to tell which positions carry a pause.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AlignedWord, Alignment, LabeledSentence, PIP_MIN_GAP_MS, RP_MIN_GAP_MS};
use crate::pausecat::DurationCategorizer;
use crate::textnorm::{tokenize_units, Unit, Vocabulary, DEFAULT_UNK};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no speaker styles given")]
    NoStyles,
    #[error("word class {0:?} has no entries")]
    EmptyClass(WordClass),
    #[error("word {0:?} cannot be tokenized with the vocabulary")]
    Untokenizable(String),
    #[error("style {speaker}: {reason}")]
    Style { speaker: String, reason: String },
    #[error("categorizer needs two thresholds, got {0:?}")]
    Thresholds(Vec<u32>),
    #[error("io error at {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordClass {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
    Prep,
    Conj,
    Pron,
}

impl WordClass {
    pub const ALL: [WordClass; 8] = [
        WordClass::Det,
        WordClass::Adj,
        WordClass::Noun,
        WordClass::Verb,
        WordClass::Adv,
        WordClass::Prep,
        WordClass::Conj,
        WordClass::Pron,
    ];
}

/// Words per class, each given as its subword pieces (`##` marks
/// continuation pieces).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub classes: Vec<(WordClass, Vec<Vec<String>>)>,
}

const TOY_LEXICON: &[(WordClass, &[&str])] = &[
    (WordClass::Det, &["the", "a", "this", "that", "every", "some"]),
    (
        WordClass::Adj,
        &["quick", "small", "old", "green", "bright", "quiet", "heavy", "gentle", "care ##ful", "happy", "dark ##er", "cold"],
    ),
    (
        WordClass::Noun,
        &[
            "house", "house ##s", "dog", "river", "teach ##er", "garden", "window", "letter", "mountain", "student",
            "city", "paint ##er", "road", "boat ##s", "friend", "book",
        ],
    ),
    (
        WordClass::Verb,
        &[
            "walk ##ed", "open ##ed", "found", "paint ##ed", "carried", "read ##s", "like ##s", "saw", "help ##ed",
            "watch ##ed", "visit ##ed", "left",
        ],
    ),
    (WordClass::Adv, &["slow ##ly", "quick ##ly", "quiet ##ly", "often", "again", "today", "late ##ly", "soon"]),
    (WordClass::Prep, &["in", "on", "near", "under", "across", "behind", "with", "from"]),
    (WordClass::Conj, &["and", "but", "while", "because", "so"]),
    (WordClass::Pron, &["she", "he", "they", "we", "you"]),
];

impl Lexicon {
    pub fn toy() -> Self {
        Lexicon {
            classes: TOY_LEXICON
                .iter()
                .map(|(c, words)| (*c, words.iter().map(|w| w.split(' ').map(String::from).collect()).collect()))
                .collect(),
        }
    }

    pub fn words(&self, class: WordClass) -> &[Vec<String>] {
        self.classes.iter().find(|(c, _)| *c == class).map(|(_, w)| w.as_slice()).unwrap_or(&[])
    }

    /// Surface form of a word: its pieces joined without the `##` marks.
    pub fn surface(pieces: &[String]) -> String {
        pieces.iter().map(|p| p.trim_start_matches("##")).collect()
    }

    /// `[UNK]`, `[MASK]`, the punctuation marks, then every piece.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut entries: Vec<String> = vec![DEFAULT_UNK.into(), "[MASK]".into()];
        entries.extend(crate::textnorm::PUNCTUATION.iter().map(|c| c.to_string()));
        for (_, words) in &self.classes {
            for p in words.iter().flatten() {
                if !entries.contains(p) {
                    entries.push(p.clone());
                }
            }
        }
        Vocabulary::new(entries).expect("unique entries")
    }

    /// Every class is non-empty and every word tokenizes into its pieces.
    pub fn check(&self, vocab: &Vocabulary) -> Result<(), SynthError> {
        for class in WordClass::ALL {
            let words = self.words(class);
            if words.is_empty() {
                return Err(SynthError::EmptyClass(class));
            }
            for pieces in words {
                let surface = Lexicon::surface(pieces);
                let got: Vec<String> = crate::textnorm::wordpiece_tokenize(&surface, vocab, 0)
                    .iter()
                    .map(|t| t.canonical())
                    .collect();
                if &got != pieces {
                    return Err(SynthError::Untokenizable(surface));
                }
            }
        }
        Ok(())
    }
}

/// Where a speaker inserts respiratory pauses. Positions followed by
/// punctuation and the last word of a sentence never get one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RpRule {
    /// After every n-th word of each clause (clauses end at punctuation).
    EveryNth { n: usize },
    /// After every word of the class.
    AfterClass { class: WordClass },
    /// Before every word of the class.
    BeforeClass { class: WordClass },
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStyle {
    pub speaker: String,
    pub rp_rule: RpRule,
    pub rp_category: u8,
    pub pip_category: u8,
    /// Probability that a sentence-internal punctuation mark gets no pause.
    pub pip_drop_rate: f64,
}

impl SpeakerStyle {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: &str| {
            Err(SynthError::Style { speaker: self.speaker.clone(), reason: reason.to_string() })
        };
        if !(1..=3).contains(&self.rp_category) || !(1..=3).contains(&self.pip_category) {
            return bad("categories must be 1, 2 or 3");
        }
        if !(0.0..=1.0).contains(&self.pip_drop_rate) {
            return bad("pip_drop_rate must lie in [0, 1]");
        }
        if self.rp_rule == (RpRule::EveryNth { n: 0 }) {
            return bad("every-n-th rule needs n >= 1");
        }
        Ok(())
    }
}

/// Eight speakers whose RP rules disagree with one another on the same
/// text.
pub fn contrasting_styles(pip_drop_rate: f64) -> Vec<SpeakerStyle> {
    use WordClass::*;
    let rules = [
        (RpRule::AfterClass { class: Noun }, 1, 2),
        (RpRule::BeforeClass { class: Prep }, 2, 3),
        (RpRule::AfterClass { class: Verb }, 1, 1),
        (RpRule::BeforeClass { class: Det }, 2, 2),
        (RpRule::AfterClass { class: Adv }, 3, 3),
        (RpRule::BeforeClass { class: Verb }, 1, 2),
        (RpRule::AfterClass { class: Adj }, 2, 1),
        (RpRule::BeforeClass { class: Conj }, 1, 3),
    ];
    rules
        .into_iter()
        .enumerate()
        .map(|(i, (rp_rule, rp_category, pip_category))| SpeakerStyle {
            speaker: format!("spk{i}"),
            rp_rule,
            rp_category,
            pip_category,
            pip_drop_rate,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Item {
    Word(WordClass, Vec<String>),
    Punct(char),
}

struct Grammar<'a> {
    lex: &'a Lexicon,
}

impl Grammar<'_> {
    fn word(&self, class: WordClass, rng: &mut impl Rng, out: &mut Vec<Item>) {
        let words = self.lex.words(class);
        out.push(Item::Word(class, words[rng.random_range(0..words.len())].clone()));
    }

    fn noun_phrase(&self, rng: &mut impl Rng, out: &mut Vec<Item>) {
        if rng.random_bool(0.2) {
            return self.word(WordClass::Pron, rng, out);
        }
        self.word(WordClass::Det, rng, out);
        if rng.random_bool(0.5) {
            self.word(WordClass::Adj, rng, out);
            if rng.random_bool(0.15) {
                out.push(Item::Punct(','));
                self.word(WordClass::Adj, rng, out);
            }
        }
        self.word(WordClass::Noun, rng, out);
    }

    fn prep_phrase(&self, rng: &mut impl Rng, out: &mut Vec<Item>) {
        self.word(WordClass::Prep, rng, out);
        self.noun_phrase(rng, out);
    }

    fn clause(&self, rng: &mut impl Rng, out: &mut Vec<Item>) {
        self.noun_phrase(rng, out);
        if rng.random_bool(0.2) {
            self.word(WordClass::Adv, rng, out);
        }
        self.word(WordClass::Verb, rng, out);
        if rng.random_bool(0.7) {
            self.noun_phrase(rng, out);
        }
        if rng.random_bool(0.5) {
            self.prep_phrase(rng, out);
        }
        if rng.random_bool(0.3) {
            self.word(WordClass::Adv, rng, out);
        }
    }

    fn sentence(&self, rng: &mut impl Rng) -> Vec<Item> {
        let mut out = Vec::new();
        if rng.random_bool(0.25) {
            self.prep_phrase(rng, &mut out);
            out.push(Item::Punct(','));
        }
        self.clause(rng, &mut out);
        if rng.random_bool(0.5) {
            out.push(Item::Punct(if rng.random_bool(0.8) { ',' } else { ';' }));
            self.word(WordClass::Conj, rng, &mut out);
            self.clause(rng, &mut out);
        }
        let end = match rng.random_range(0..10) {
            0 => '?',
            1 => '!',
            _ => '.',
        };
        out.push(Item::Punct(end));
        out
    }
}

/// Raw transcript: punctuation attached to the preceding word, first
/// letter capitalized, and an occasional doubled final mark.
fn transcript(items: &[Item], doubled_end: bool) -> String {
    let mut text = String::new();
    for item in items {
        match item {
            Item::Word(_, pieces) => {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(&Lexicon::surface(pieces));
            }
            Item::Punct(c) => text.push(*c),
        }
    }
    if doubled_end {
        if let Some(last) = text.chars().last() {
            text.push(last);
        }
    }
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => text,
    }
}

/// Which spoken words are followed by an RP under `rule`.
fn rp_positions(words: &[(WordClass, bool)], rule: &RpRule) -> Vec<bool> {
    let n = words.len();
    let mut in_clause = 0;
    (0..n)
        .map(|k| {
            let (class, punct_after) = words[k];
            in_clause += 1;
            let hit = match *rule {
                RpRule::EveryNth { n } => in_clause % n == 0,
                RpRule::AfterClass { class: c } => class == c,
                RpRule::BeforeClass { class: c } => k + 1 < n && words[k + 1].0 == c,
                RpRule::Never => false,
            };
            if punct_after {
                in_clause = 0;
            }
            hit && !punct_after && k + 1 < n
        })
        .collect()
}

/// Inclusive duration range that the categorizer maps to `category` and
/// that clears the event threshold `min_gap`.
fn category_range(category: u8, min_gap: u32, thresholds: &[u32]) -> (u32, u32) {
    let (t1, t2) = (thresholds[0], thresholds[1]);
    match category {
        1 => (min_gap + 10, t1 - 20),
        2 => (t1 + 20, t2 - 20),
        _ => (t2 + 50, t2 + 500),
    }
}

/// One generated utterance and the labels the ingestion pipeline must
/// recover from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub alignment: Alignment,
    pub expected: LabeledSentence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub utterances: Vec<SynthUtterance>,
    pub vocab: Vocabulary,
    pub styles: Vec<SpeakerStyle>,
}

/// Generates `n_sentences` utterances, speakers assigned round-robin. Each
/// sentence draws from its own seeded stream, so sentence `i` is the same
/// regardless of `n_sentences`.
pub fn synth_corpus(
    styles: &[SpeakerStyle],
    n_sentences: usize,
    lexicon: &Lexicon,
    categorizer: &DurationCategorizer,
    seed: u64,
) -> Result<SynthCorpus, SynthError> {
    if styles.is_empty() {
        return Err(SynthError::NoStyles);
    }
    for s in styles {
        s.validate()?;
    }
    let thresholds = categorizer.thresholds();
    if thresholds.len() != 2 || thresholds[0] < RP_MIN_GAP_MS + 40 || thresholds[1] < thresholds[0] + 60 {
        return Err(SynthError::Thresholds(thresholds.to_vec()));
    }
    let vocab = lexicon.vocabulary();
    lexicon.check(&vocab)?;
    let grammar = Grammar { lex: lexicon };

    let mut utterances = Vec::with_capacity(n_sentences);
    for i in 0..n_sentences {
        let style = &styles[i % styles.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
        let items = grammar.sentence(&mut rng);
        let text = transcript(&items, rng.random_bool(0.1));

        // (class, punctuation follows) per spoken word
        let words: Vec<(WordClass, bool)> = items
            .iter()
            .enumerate()
            .filter_map(|(j, it)| match it {
                Item::Word(c, _) => Some((*c, matches!(items.get(j + 1), Some(Item::Punct(_))))),
                Item::Punct(_) => None,
            })
            .collect();
        let rp = rp_positions(&words, &style.rp_rule);

        let mut aligned = Vec::with_capacity(words.len());
        let mut gaps = Vec::with_capacity(words.len());
        let mut t = rng.random_range(100..=300);
        let surfaces = items.iter().filter_map(|it| match it {
            Item::Word(_, p) => Some(Lexicon::surface(p)),
            Item::Punct(_) => None,
        });
        for (k, surface) in surfaces.enumerate() {
            let end = t + rng.random_range(120..=450);
            aligned.push(AlignedWord { word: surface, start_ms: t, end_ms: end });
            let last = k + 1 == words.len();
            let gap = if last {
                None
            } else if words[k].1 {
                if rng.random_bool(style.pip_drop_rate) {
                    Some((rng.random_range(0..=PIP_MIN_GAP_MS), None))
                } else {
                    let (lo, hi) = category_range(style.pip_category, PIP_MIN_GAP_MS, thresholds);
                    Some((rng.random_range(lo..=hi), Some(style.pip_category)))
                }
            } else if rp[k] {
                let (lo, hi) = category_range(style.rp_category, RP_MIN_GAP_MS, thresholds);
                Some((rng.random_range(lo..=hi), Some(style.rp_category)))
            } else {
                Some((rng.random_range(0..=RP_MIN_GAP_MS), None))
            };
            gaps.push(gap.and_then(|g| g.1));
            t = end + gap.map_or(0, |g| g.0);
        }

        let units: Vec<Unit> = crate::textnorm::normalize_sentence(&text).expect("grammar output is non-empty");
        let tokens = tokenize_units(&units, &vocab);
        let id = format!("utt{i:05}");
        let mut expected = LabeledSentence::unlabeled(&id, &style.speaker, tokens);
        // word index -> token positions
        let mut spoken = 0;
        for (pos, tok) in expected.tokens.clone().iter().enumerate() {
            if tok.is_punct || !tok.is_word_final {
                continue;
            }
            if let Some(cat) = gaps.get(spoken).copied().flatten() {
                if words[spoken].1 {
                    expected.p_pip[pos + 1] = 1;
                    expected.c_pip[pos + 1] = cat;
                } else {
                    expected.p_rp[pos] = 1;
                    expected.c_rp[pos] = cat;
                }
            }
            spoken += 1;
        }
        utterances.push(SynthUtterance {
            id,
            alignment: Alignment { speaker: style.speaker.clone(), transcript: text, words: aligned },
            expected,
        });
    }
    Ok(SynthCorpus { utterances, vocab, styles: styles.to_vec() })
}

fn io(path: &Path, e: impl ToString) -> SynthError {
    SynthError::Io { path: path.display().to_string(), reason: e.to_string() }
}

impl SynthCorpus {
    /// Writes `<id>.align` per utterance, `vocab.txt`, `styles.json` and
    /// `transcripts.tsv` (id, speaker, text) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| io(&path, e))
        };
        let mut tsv = String::new();
        for u in &self.utterances {
            write(&format!("{}.align", u.id), u.alignment.to_text())?;
            tsv.push_str(&format!("{}\t{}\t{}\n", u.id, u.alignment.speaker, u.alignment.transcript));
        }
        write("transcripts.tsv", tsv)?;
        write("vocab.txt", self.vocab.to_text())?;
        write("styles.json", serde_json::to_string_pretty(&self.styles).expect("styles serialize") + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::label_alignment;

    fn style(rule: RpRule, drop: f64) -> SpeakerStyle {
        SpeakerStyle { speaker: "s".into(), rp_rule: rule, rp_category: 1, pip_category: 2, pip_drop_rate: drop }
    }

    fn corpus(styles: &[SpeakerStyle], n: usize, seed: u64) -> SynthCorpus {
        synth_corpus(styles, n, &Lexicon::toy(), &DurationCategorizer::default(), seed).unwrap()
    }

    #[test]
    fn toy_lexicon_tokenizes_as_written() {
        let lex = Lexicon::toy();
        lex.check(&lex.vocabulary()).unwrap();
    }

    #[test]
    fn ingestion_recovers_labels() {
        let c = corpus(&contrasting_styles(0.2), 200, 3);
        let cat = DurationCategorizer::default();
        for u in &c.utterances {
            let got = label_alignment(&u.id, &u.alignment, &c.vocab, &cat).unwrap();
            assert_eq!(got, u.expected, "{}", u.alignment.transcript);
        }
    }

    #[test]
    fn every_third_word() {
        let c = corpus(&[style(RpRule::EveryNth { n: 3 }, 0.0)], 50, 1);
        for u in &c.utterances {
            let mut in_clause = 0;
            let toks = &u.expected.tokens;
            for (i, t) in toks.iter().enumerate() {
                if !t.rp_eligible() {
                    continue;
                }
                in_clause += 1;
                let punct_next = toks.get(i + 1).is_some_and(|n| n.is_punct);
                let last_word = toks[i + 1..].iter().all(|n| n.is_punct);
                let want = in_clause % 3 == 0 && !punct_next && !last_word;
                assert_eq!(u.expected.p_rp[i] == 1, want, "{}", u.alignment.transcript);
                if want {
                    assert_eq!(u.expected.c_rp[i], 1);
                }
                if punct_next {
                    in_clause = 0;
                }
            }
        }
    }

    #[test]
    fn no_drop_means_every_internal_mark_pauses() {
        let c = corpus(&[style(RpRule::Never, 0.0)], 100, 2);
        for u in &c.utterances {
            let toks = &u.expected.tokens;
            for (i, t) in toks.iter().enumerate() {
                let internal = t.is_punct && toks[i + 1..].iter().any(|n| !n.is_punct);
                assert_eq!(u.expected.p_pip[i] == 1, internal);
            }
            assert!(u.expected.p_rp.iter().all(|&p| p == 0));
        }
    }

    #[test]
    fn deterministic_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        corpus(&contrasting_styles(0.2), 30, 9).write(a.path()).unwrap();
        corpus(&contrasting_styles(0.2), 30, 9).write(b.path()).unwrap();
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
        assert_ne!(corpus(&contrasting_styles(0.2), 5, 9).utterances, corpus(&contrasting_styles(0.2), 5, 10).utterances);
    }

    #[test]
    fn rejects_bad_input() {
        let lex = Lexicon::toy();
        let cat = DurationCategorizer::default();
        assert!(matches!(synth_corpus(&[], 1, &lex, &cat, 0), Err(SynthError::NoStyles)));
        let mut small = lex.clone();
        small.classes.retain(|(c, _)| *c != WordClass::Conj);
        assert!(matches!(
            synth_corpus(&contrasting_styles(0.0), 1, &small, &cat, 0),
            Err(SynthError::EmptyClass(WordClass::Conj))
        ));
        let bad = SpeakerStyle { rp_category: 4, ..style(RpRule::Never, 0.0) };
        assert!(synth_corpus(&[bad], 1, &lex, &cat, 0).is_err());
    }
}
