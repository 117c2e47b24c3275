//! `decide` against a straight-line reference on an exhaustive grid.

use pausekit::models::{decide, DecisionThresholds, PredictionOutput};
use pausekit::{PauseKind, Token};

use crate::report;

fn word(text: &str, word_index: usize, cont: bool, last: bool) -> Token {
    Token { text: text.into(), is_continuation: cont, is_punct: false, word_index, is_word_final: last }
}

/// Gate on the probability, then the first maximum among categories 1..3.
fn reference(prob: f64, dist: [f64; 4], threshold: f64, eligible: bool) -> Option<u8> {
    if !eligible || prob < threshold {
        return None;
    }
    let (a, b, c) = (dist[1], dist[2], dist[3]);
    if a >= b && a >= c {
        Some(1)
    } else if b >= c {
        Some(2)
    } else {
        Some(3)
    }
}

pub fn grid() -> bool {
    // a non-final subword, its word-final piece, and a punctuation mark
    let tokens = vec![word("wait", 0, false, false), word("ing", 0, true, true), Token::punct(',', 1)];
    let probs = [0.0, 0.1, 0.3, 0.49, 0.5, 0.51, 0.7, 0.9, 0.99, 1.0];
    let levels = [0.0, 0.2, 0.5, 0.8, 1.0];
    let thresholds = [0.5, 0.0, 0.99, 0.3];
    let mut cases = 0usize;
    let mut mismatches = 0usize;
    for (pi, &p) in probs.iter().enumerate() {
        for &a in &levels {
            for &b in &levels {
                for &c in &levels {
                    for k in 0..8 {
                        // the "no pause" class never influences the category
                        let dist = [0.1 * k as f64, a, b, c];
                        let th = thresholds[(pi + k) % thresholds.len()];
                        cases += 1;
                        let out = PredictionOutput {
                            rp_prob: vec![p; 3],
                            rp_cat: Some(vec![dist; 3]),
                            pip_prob: Some(vec![p; 3]),
                            pip_cat: Some(vec![dist; 3]),
                        };
                        let got = decide(&out, &tokens, DecisionThresholds { rp: th, pip: th }).expect("lengths match");
                        let expect = [
                            reference(p, dist, th, false).map(|c| (PauseKind::Rp, c)),
                            reference(p, dist, th, true).map(|c| (PauseKind::Rp, c)),
                            reference(p, dist, th, true).map(|c| (PauseKind::Pip, c)),
                        ];
                        let got: Vec<_> = got.iter().map(|d| d.map(|d| (d.kind, d.category.expect("categorized")))).collect();
                        if got != expect {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    let pass = cases == 10_000 && mismatches == 0;
    report("Decision rule", pass, &format!("{mismatches} mismatches in {cases} grid cases"))
}
