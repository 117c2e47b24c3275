//! Corpus ingestion against a brute-force labeler written from the rules
//! alone.

use pausekit::corpus::{label_alignment, parse_alignment, AlignedWord};
use pausekit::textnorm::PUNCTUATION;
use pausekit::{Alignment, DurationCategorizer, Vocabulary};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report;

pub const UTTERANCES: u64 = 1000;

const GAPS: [i64; 15] = [0, 10, 29, 30, 31, 49, 50, 51, 120, 299, 300, 301, 700, 701, 1300];

fn random_vocab(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut entries = vec!["[UNK]".to_string()];
    for _ in 0..rng.random_range(8..30) {
        let len = rng.random_range(1..4);
        let piece: String = (0..len).map(|_| *b"abcde".choose(rng).unwrap() as char).collect();
        let entry = if rng.random_bool(0.5) { format!("##{piece}") } else { piece };
        if !entries.contains(&entry) {
            entries.push(entry);
        }
    }
    entries
}

fn random_utterance(rng: &mut ChaCha8Rng) -> Alignment {
    let mut text = String::new();
    let mut words = Vec::new();
    if rng.random_bool(0.1) {
        text.push('(');
    }
    for i in 0..rng.random_range(1..12) {
        if i > 0 {
            text.push(' ');
        }
        let len = rng.random_range(1..8);
        let w: String = (0..len).map(|_| *b"abcdefABE".choose(rng).unwrap() as char).collect();
        text.push_str(&w);
        words.push(w.to_lowercase());
        if rng.random_bool(0.3) {
            for _ in 0..rng.random_range(1..4) {
                if rng.random_bool(0.2) {
                    text.push(' ');
                }
                text.push(*PUNCTUATION.choose(rng).unwrap());
            }
        }
    }
    let mut t: i64 = 100;
    let words = words
        .into_iter()
        .map(|word| {
            let start = t.max(0);
            let end = start + rng.random_range(20..400);
            t = end + if rng.random_bool(0.7) { *GAPS.choose(rng).unwrap() } else { rng.random_range(0..1500) };
            AlignedWord { word, start_ms: start as u32, end_ms: end as u32 }
        })
        .collect();
    Alignment { speaker: format!("s{}", rng.random_range(0..8)), transcript: text, words }
}

/// Row per token: canonical text and the four labels.
type Row = (String, u8, u8, u8, u8);

fn reference(a: &Alignment, vocab: &[String]) -> Vec<Row> {
    // units, with punctuation runs reduced to their first mark
    let mut spaced = String::new();
    for c in a.transcript.chars() {
        if PUNCTUATION.contains(&c) {
            spaced.push_str(&format!(" \u{1}{c} "));
        } else {
            spaced.extend(c.to_lowercase());
        }
    }
    let mut units: Vec<(bool, String)> = Vec::new();
    for piece in spaced.split_whitespace() {
        let punct = piece.starts_with('\u{1}');
        if punct && units.last().is_some_and(|u| u.0) {
            continue;
        }
        units.push((punct, piece.trim_start_matches('\u{1}').to_string()));
    }

    // tokens, remembering each spoken word's last token and following unit
    let mut rows: Vec<Row> = Vec::new();
    let mut word_last = Vec::new();
    let mut next_is_punct = Vec::new();
    for (u, (punct, text)) in units.iter().enumerate() {
        if *punct {
            rows.push((text.clone(), 0, 0, 0, 0));
            continue;
        }
        let chars: Vec<char> = text.chars().collect();
        let mut pieces = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let mut best: Option<usize> = None;
            for entry in vocab {
                let (cont, body) = match entry.strip_prefix("##") {
                    Some(b) => (true, b),
                    None => (false, entry.as_str()),
                };
                let body: Vec<char> = body.chars().collect();
                if cont == (pos > 0) && !body.is_empty() && chars[pos..].starts_with(&body) {
                    best = best.max(Some(body.len()));
                }
            }
            let Some(len) = best else {
                pieces = vec!["[UNK]".to_string()];
                break;
            };
            let s: String = chars[pos..pos + len].iter().collect();
            pieces.push(if pos > 0 { format!("##{s}") } else { s });
            pos += len;
        }
        for p in pieces {
            rows.push((p, 0, 0, 0, 0));
        }
        word_last.push(rows.len() - 1);
        next_is_punct.push(units.get(u + 1).is_some_and(|n| n.0));
    }

    for k in 0..a.words.len().saturating_sub(1) {
        let gap = a.words[k + 1].start_ms as i64 - a.words[k].end_ms as i64;
        let category = if gap < 300 {
            1
        } else if gap <= 700 {
            2
        } else {
            3
        };
        let at = word_last[k];
        if next_is_punct[k] {
            if gap > 30 {
                rows[at + 1].3 = 1;
                rows[at + 1].4 = category;
            }
        } else if gap > 50 {
            rows[at].1 = 1;
            rows[at].2 = category;
        }
    }
    rows
}

pub fn oracle() -> bool {
    let categorizer = DurationCategorizer::default();
    let mut mismatches = 0;
    let mut tokens = 0;
    let mut pauses = 0;
    for seed in 0..UTTERANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = random_vocab(&mut rng);
        let vocab = Vocabulary::new(entries.iter().map(String::as_str)).expect("vocabulary");
        let original = random_utterance(&mut rng);
        let alignment = parse_alignment(&original.to_text()).expect("round trip");
        let labeled = label_alignment(&format!("u{seed}"), &alignment, &vocab, &categorizer).expect("labels");
        let got: Vec<Row> = (0..labeled.len())
            .map(|i| (labeled.tokens[i].canonical(), labeled.p_rp[i], labeled.c_rp[i], labeled.p_pip[i], labeled.c_pip[i]))
            .collect();
        let expected = reference(&original, &entries);
        tokens += expected.len();
        pauses += expected.iter().filter(|r| r.1 + r.3 > 0).count();
        if got != expected {
            if mismatches == 0 {
                println!("    first mismatch, seed {seed}: {:?}\n    got      {got:?}\n    expected {expected:?}", original.transcript);
            }
            mismatches += 1;
        }
    }
    report(
        "Ingestion oracle",
        mismatches == 0,
        &format!("{mismatches} of {UTTERANCES} utterances differ ({tokens} tokens, {pauses} pauses)"),
    )
}
