//! Evaluation: the unbalanced F-score, last-subword precision/recall,
//! threshold sweeps, filtered PR curves and category confusion matrices.
//!
//! Position metrics only look at eligible tokens: word-final
//! non-punctuation tokens for RPs, punctuation tokens for PIPs. Anything a
//! model predicts on a non-final subword is ignored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledSentence, PauseKind};
use crate::models::{decide, DecisionThresholds, PredictionOutput};
use crate::textnorm::Token;

pub const METRICS_FORMAT: &str = "pausekit-metrics";
pub const METRICS_VERSION: u32 = 1;
/// Sweeps evaluate at most this many candidate thresholds.
pub const MAX_SWEEP_POINTS: usize = 1000;
/// Curves keep points whose precision and recall both exceed this.
pub const CURVE_FLOOR: f64 = 0.1;
pub const BETA_RP: f64 = 0.5;
pub const BETA_PIP: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("{0} = {1} is outside [0, 1]")]
    OutOfRange(&'static str, f64),
    #[error("{what}: expected {expected} entries, got {found}")]
    Length { what: &'static str, expected: usize, found: usize },
    #[error("no eligible {0} positions to sweep over")]
    NoCandidates(&'static str),
    #[error("recall is undefined: no positive {0} labels at eligible positions")]
    NoPositives(&'static str),
    #[error("label {label} at position {index} is not a pause category")]
    BadLabel { index: usize, label: u8 },
    #[error("decision at position {0} carries no category")]
    Uncategorized(usize),
    #[error("model output has no {0} head")]
    MissingHead(&'static str),
}

fn kind_name(kind: PauseKind) -> &'static str {
    match kind {
        PauseKind::Rp => "RP",
        PauseKind::Pip => "PIP",
    }
}

fn eligible(token: &Token, kind: PauseKind) -> bool {
    match kind {
        PauseKind::Rp => token.rp_eligible(),
        PauseKind::Pip => token.pip_eligible(),
    }
}

/// `(1 + b^2) P R / (b^2 P + R)`; zero when both P and R are zero.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> Result<f64, EvalError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(EvalError::InvalidBeta(beta));
    }
    for (name, v) in [("precision", precision), ("recall", recall)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::OutOfRange(name, v));
        }
    }
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + b2) * precision * recall / den)
}

/// Confusion counts at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrCounts {
    /// Precision, or 0 with the flag set when nothing was predicted.
    pub fn precision(&self) -> (f64, bool) {
        match self.tp + self.fp {
            0 => (0.0, true),
            n => (self.tp as f64 / n as f64, false),
        }
    }

    /// Recall, or 0 with the flag set when there are no positives.
    pub fn recall(&self) -> (f64, bool) {
        match self.tp + self.fn_ {
            0 => (0.0, true),
            n => (self.tp as f64 / n as f64, false),
        }
    }

    pub fn add(&mut self, other: PrCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionPr {
    pub precision: f64,
    pub recall: f64,
    pub counts: PrCounts,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl PositionPr {
    fn from_counts(counts: PrCounts) -> Self {
        let (precision, precision_undefined) = counts.precision();
        let (recall, recall_undefined) = counts.recall();
        PositionPr { precision, recall, counts, precision_undefined, recall_undefined }
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), EvalError> {
    if expected == found {
        Ok(())
    } else {
        Err(EvalError::Length { what, expected, found })
    }
}

/// Counts a pause as predicted where `prob >= threshold`, on eligible
/// positions only. Inputs are parallel per-token vectors, possibly spanning
/// many sentences.
pub fn position_counts(probs: &[f64], labels: &[u8], tokens: &[Token], threshold: f64, kind: PauseKind) -> Result<PrCounts, EvalError> {
    check_len("probabilities", tokens.len(), probs.len())?;
    check_len("labels", tokens.len(), labels.len())?;
    let mut c = PrCounts::default();
    for ((tok, &p), &y) in tokens.iter().zip(probs).zip(labels) {
        if !eligible(tok, kind) {
            continue;
        }
        match (p >= threshold, y != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

pub fn position_pr(probs: &[f64], labels: &[u8], tokens: &[Token], threshold: f64, kind: PauseKind) -> Result<PositionPr, EvalError> {
    position_counts(probs, labels, tokens, threshold, kind).map(PositionPr::from_counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    #[serde(default)]
    pub precision_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub beta: f64,
    pub best: PrPoint,
    /// One point per candidate threshold, ascending.
    pub points: Vec<PrPoint>,
}

/// Candidate thresholds: the sorted unique probabilities, thinned to
/// evenly spaced quantiles when there are more than [`MAX_SWEEP_POINTS`].
fn candidates(sorted_unique: &[f64]) -> Vec<f64> {
    let n = sorted_unique.len();
    if n <= MAX_SWEEP_POINTS {
        return sorted_unique.to_vec();
    }
    let mut out: Vec<f64> = (0..MAX_SWEEP_POINTS)
        .map(|i| sorted_unique[(i * (n - 1) + (MAX_SWEEP_POINTS - 1) / 2) / (MAX_SWEEP_POINTS - 1)])
        .collect();
    out.dedup();
    out
}

/// Tries every candidate threshold and keeps the highest F-beta, breaking
/// ties toward higher precision.
pub fn sweep_threshold(probs: &[f64], labels: &[u8], tokens: &[Token], beta: f64, kind: PauseKind) -> Result<Sweep, EvalError> {
    check_len("probabilities", tokens.len(), probs.len())?;
    check_len("labels", tokens.len(), labels.len())?;
    f_beta(0.5, 0.5, beta)?;
    let mut scored: Vec<(f64, bool)> = tokens
        .iter()
        .zip(probs)
        .zip(labels)
        .filter(|((t, _), _)| eligible(t, kind))
        .map(|((_, &p), &y)| (p, y != 0))
        .collect();
    if scored.is_empty() {
        return Err(EvalError::NoCandidates(kind_name(kind)));
    }
    let positives = scored.iter().filter(|s| s.1).count();
    if positives == 0 {
        return Err(EvalError::NoPositives(kind_name(kind)));
    }
    // Descending by probability: prefix sums give the counts at any cut.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut unique: Vec<f64> = scored.iter().map(|s| s.0).collect();
    unique.reverse();
    unique.dedup();
    let thresholds = candidates(&unique);

    let mut points = Vec::with_capacity(thresholds.len());
    let mut idx = 0;
    let mut tp = 0;
    for &t in thresholds.iter().rev() {
        while idx < scored.len() && scored[idx].0 >= t {
            tp += scored[idx].1 as usize;
            idx += 1;
        }
        let counts = PrCounts { tp, fp: idx - tp, fn_: positives - tp };
        let pr = PositionPr::from_counts(counts);
        points.push(PrPoint {
            threshold: t,
            precision: pr.precision,
            recall: pr.recall,
            f: f_beta(pr.precision, pr.recall, beta)?,
            precision_undefined: pr.precision_undefined,
        });
    }
    points.reverse();
    let mut best = points[0];
    for p in &points[1..] {
        if p.f > best.f || (p.f == best.f && p.precision > best.precision) {
            best = *p;
        }
    }
    Ok(Sweep { beta, best, points })
}

/// Drops points with precision or recall at or below 0.1 (and flagged
/// points), then sorts by recall.
pub fn pr_curve(points: &[PrPoint]) -> Vec<PrPoint> {
    let mut kept: Vec<PrPoint> = points
        .iter()
        .filter(|p| !p.precision_undefined && p.precision > CURVE_FLOOR && p.recall > CURVE_FLOOR)
        .copied()
        .collect();
    kept.sort_by(|a, b| a.recall.total_cmp(&b.recall).then(a.threshold.total_cmp(&b.threshold)));
    kept
}

/// Tab-separated plotting table with a header row.
pub fn curve_table(points: &[PrPoint]) -> String {
    let mut out = String::from("threshold\tprecision\trecall\n");
    for p in points {
        out.push_str(&format!("{:.6}\t{:.6}\t{:.6}\n", p.threshold, p.precision, p.recall));
    }
    out
}

/// Rows are labeled categories 1..=3, columns predicted categories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn get(&self, label: u8, predicted: u8) -> usize {
        self.counts[label as usize - 1][predicted as usize - 1]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }
}

/// Tallies positions that are both labeled as a pause of `kind` and
/// predicted as one. Labeled pauses the model missed are left out.
pub fn category_confusion(
    decisions: &[Option<crate::models::Decision>],
    labels: &[u8],
    kind: PauseKind,
) -> Result<ConfusionMatrix, EvalError> {
    check_len("decisions", labels.len(), decisions.len())?;
    let mut m = ConfusionMatrix::default();
    for (i, (d, &y)) in decisions.iter().zip(labels).enumerate() {
        if y > 3 {
            return Err(EvalError::BadLabel { index: i, label: y });
        }
        let Some(d) = d.filter(|d| d.kind == kind) else { continue };
        if y == 0 {
            continue;
        }
        let c = d.category.ok_or(EvalError::Uncategorized(i))?;
        m.counts[y as usize - 1][c as usize - 1] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub beta: f64,
    /// Metrics at the model's configured decision threshold.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub counts: PrCounts,
    /// Best point of a full threshold sweep.
    pub best: PrPoint,
    pub pr_curve: Vec<PrPoint>,
    pub confusion: Option<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub sentences: usize,
    pub rp: TaskReport,
    pub pip: Option<TaskReport>,
}

/// Flattened per-token vectors of a dataset and its predictions.
#[derive(Debug, Clone, Default)]
pub struct Flat {
    pub tokens: Vec<Token>,
    pub probs: Vec<f64>,
    pub p_labels: Vec<u8>,
    pub c_labels: Vec<u8>,
    pub decisions: Vec<Option<crate::models::Decision>>,
}

/// Concatenates one task's vectors over every sentence.
pub fn flatten(
    dataset: &[LabeledSentence],
    outputs: &[PredictionOutput],
    kind: PauseKind,
    thresholds: DecisionThresholds,
) -> Result<Flat, EvalError> {
    check_len("predictions", dataset.len(), outputs.len())?;
    let mut flat = Flat::default();
    for (s, o) in dataset.iter().zip(outputs) {
        let probs = match kind {
            PauseKind::Rp => &o.rp_prob,
            PauseKind::Pip => o.pip_prob.as_ref().ok_or(EvalError::MissingHead("PIP"))?,
        };
        check_len("probabilities", s.tokens.len(), probs.len())?;
        let decisions = decide(o, &s.tokens, thresholds).map_err(|_| EvalError::Length {
            what: "model outputs",
            expected: s.tokens.len(),
            found: o.len(),
        })?;
        flat.tokens.extend(s.tokens.iter().cloned());
        flat.probs.extend_from_slice(probs);
        let (p, c) = match kind {
            PauseKind::Rp => (&s.p_rp, &s.c_rp),
            PauseKind::Pip => (&s.p_pip, &s.c_pip),
        };
        flat.p_labels.extend_from_slice(p);
        flat.c_labels.extend_from_slice(c);
        flat.decisions.extend(decisions);
    }
    Ok(flat)
}

fn task_report(flat: &Flat, kind: PauseKind, beta: f64, threshold: f64, categorized: bool) -> Result<TaskReport, EvalError> {
    let pr = position_pr(&flat.probs, &flat.p_labels, &flat.tokens, threshold, kind)?;
    let sweep = sweep_threshold(&flat.probs, &flat.p_labels, &flat.tokens, beta, kind)?;
    let confusion = if categorized {
        Some(category_confusion(&flat.decisions, &flat.c_labels, kind)?)
    } else {
        None
    };
    Ok(TaskReport {
        beta,
        threshold,
        precision: pr.precision,
        recall: pr.recall,
        f: f_beta(pr.precision, pr.recall, beta)?,
        counts: pr.counts,
        best: sweep.best,
        pr_curve: pr_curve(&sweep.points),
        confusion,
    })
}

/// Full report: RP always, PIP when the outputs carry a PIP head.
/// Category confusion matrices need category heads.
pub fn evaluate(dataset: &[LabeledSentence], outputs: &[PredictionOutput], thresholds: DecisionThresholds) -> Result<MetricsReport, EvalError> {
    let rp_flat = flatten(dataset, outputs, PauseKind::Rp, thresholds)?;
    let categorized = outputs.first().is_some_and(|o| o.rp_cat.is_some());
    let rp = task_report(&rp_flat, PauseKind::Rp, BETA_RP, thresholds.rp, categorized)?;
    let pip = if outputs.first().is_some_and(|o| o.pip_prob.is_some()) {
        let flat = flatten(dataset, outputs, PauseKind::Pip, thresholds)?;
        let categorized = outputs[0].pip_cat.is_some();
        Some(task_report(&flat, PauseKind::Pip, BETA_PIP, thresholds.pip, categorized)?)
    } else {
        None
    };
    Ok(MetricsReport {
        format: METRICS_FORMAT.to_string(),
        version: METRICS_VERSION,
        sentences: dataset.len(),
        rp,
        pip,
    })
}
