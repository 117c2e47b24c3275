//! Duration categories for silent pauses.
//!
//! A one-dimensional Gaussian mixture is fitted to pause durations with EM,
//! the crossing point of every pair of adjacent weighted component densities
//! is located, and the crossings are rounded to whole hundreds of
//! milliseconds. The rounded values are the category thresholds.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VARIANCE_FLOOR: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_COMPONENTS: usize = 3;
pub const DEFAULT_THRESHOLDS: [u32; 2] = [300, 700];

#[derive(Debug, Error, PartialEq)]
pub enum CategoryError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("component count must be at least 1")]
    NoComponents,
    #[error("durations must be positive and finite (sample {0})")]
    BadSample(usize),
    #[error("data cannot support {0} distinct components")]
    DegenerateData(usize),
    #[error("cut-offs need at least two components")]
    TooFewComponents,
    #[error("rounded thresholds are not strictly ascending: {0:?}")]
    CollapsedThresholds(Vec<u32>),
    #[error("invalid thresholds {0:?}: need ascending positive multiples of 100")]
    InvalidThresholds(Vec<u32>),
    #[error("pause duration must be positive")]
    NonPositiveDuration,
}

/// Fitted 1-D Gaussian mixture; components sorted by mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm1D {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Result of [`fit_gmm`], including the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: Gmm1D,
    /// Mean per-sample log-likelihood after initialization and after every
    /// EM iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub components: usize,
    pub max_iter: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            components: DEFAULT_COMPONENTS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Gmm1D {
    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn weighted_pdf(&self, k: usize, x: f64) -> f64 {
        self.weights[k] * log_normal_pdf(x, self.means[k], self.variances[k]).exp()
    }

    /// Mean per-sample log-likelihood of `data`.
    pub fn mean_log_likelihood(&self, data: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.components()];
        let total: f64 = data
            .iter()
            .map(|&x| {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = self.weights[k].ln() + log_normal_pdf(x, self.means[k], self.variances[k]);
                }
                log_sum_exp(&buf)
            })
            .sum();
        total / data.len() as f64
    }

    fn sort_by_mean(&mut self) {
        let mut order: Vec<usize> = (0..self.components()).collect();
        order.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]));
        self.weights = order.iter().map(|&k| self.weights[k]).collect();
        self.means = order.iter().map(|&k| self.means[k]).collect();
        self.variances = order.iter().map(|&k| self.variances[k]).collect();
    }
}

/// Quantile-group initialization: the sorted data is split into `k` equal
/// groups; each group's mean seeds a component, all components share the
/// pooled within-group variance and weights are uniform.
fn initialize(sorted: &[f64], k: usize) -> Gmm1D {
    let n = sorted.len();
    let mut means = Vec::with_capacity(k);
    let mut ss = 0.0;
    for g in 0..k {
        let lo = g * n / k;
        let hi = (g + 1) * n / k;
        let group = &sorted[lo..hi];
        let m = group.iter().sum::<f64>() / group.len() as f64;
        ss += group.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        means.push(m);
    }
    let pooled = (ss / n as f64).max(VARIANCE_FLOOR);
    Gmm1D {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![pooled; k],
    }
}

/// Fits a `components`-way mixture with EM.
pub fn fit_gmm(durations: &[f64], opts: FitOptions) -> Result<GmmFit, CategoryError> {
    let k = opts.components;
    if k == 0 {
        return Err(CategoryError::NoComponents);
    }
    if durations.len() < k {
        return Err(CategoryError::TooFewSamples {
            needed: k,
            got: durations.len(),
        });
    }
    if let Some(i) = durations.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(CategoryError::BadSample(i));
    }
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(CategoryError::DegenerateData(k));
    }

    let n = durations.len();
    let mut gmm = initialize(&sorted, k);
    let mut trace = vec![gmm.mean_log_likelihood(durations)];
    let mut resp = vec![0.0; n * k];
    let mut iterations = 0;

    while iterations < opts.max_iter {
        // E-step
        let mut buf = vec![0.0; k];
        for (i, &x) in durations.iter().enumerate() {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = gmm.weights[j].ln() + log_normal_pdf(x, gmm.means[j], gmm.variances[j]);
            }
            let norm = log_sum_exp(&buf);
            for j in 0..k {
                resp[i * k + j] = (buf[j] - norm).exp();
            }
        }
        // M-step
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk <= f64::MIN_POSITIVE {
                // Empty component: keep its parameters, give it no mass.
                gmm.weights[j] = 0.0;
                continue;
            }
            let mean = (0..n).map(|i| resp[i * k + j] * durations[i]).sum::<f64>() / nk;
            let var = (0..n)
                .map(|i| resp[i * k + j] * (durations[i] - mean).powi(2))
                .sum::<f64>()
                / nk;
            gmm.weights[j] = nk / n as f64;
            gmm.means[j] = mean;
            gmm.variances[j] = var.max(VARIANCE_FLOOR);
        }
        let wsum: f64 = gmm.weights.iter().sum();
        gmm.weights.iter_mut().for_each(|w| *w /= wsum);
        iterations += 1;

        let ll = gmm.mean_log_likelihood(durations);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if ll - prev < opts.tol * prev.abs() {
            break;
        }
    }

    gmm.sort_by_mean();
    for pair in gmm.means.windows(2) {
        if (pair[1] - pair[0]).abs() <= 1e-9 * pair[0].abs().max(1.0) {
            return Err(CategoryError::DegenerateData(k));
        }
    }
    Ok(GmmFit {
        gmm,
        log_likelihood: trace,
        iterations,
    })
}

/// A crossing between two adjacent components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cutoff {
    pub value: f64,
    /// True when no interior crossing exists and the midpoint of the means
    /// was used instead.
    pub midpoint_fallback: bool,
}

/// Locates `x` in `(mean_k, mean_{k+1})` where the weighted densities of
/// adjacent components are equal.
pub fn find_cutoffs(gmm: &Gmm1D) -> Result<Vec<Cutoff>, CategoryError> {
    if gmm.components() < 2 {
        return Err(CategoryError::TooFewComponents);
    }
    Ok((0..gmm.components() - 1)
        .map(|k| adjacent_crossing(gmm, k))
        .collect())
}

fn adjacent_crossing(gmm: &Gmm1D, k: usize) -> Cutoff {
    let (m1, m2) = (gmm.means[k], gmm.means[k + 1]);
    let (v1, v2) = (gmm.variances[k], gmm.variances[k + 1]);
    let (w1, w2) = (gmm.weights[k], gmm.weights[k + 1]);
    let midpoint = Cutoff {
        value: 0.5 * (m1 + m2),
        midpoint_fallback: true,
    };
    if !(m2 > m1) || w1 <= 0.0 || w2 <= 0.0 {
        return midpoint;
    }
    // ln(w1 N1(x)) - ln(w2 N2(x)) = a x^2 + b x + c
    let a = 0.5 / v2 - 0.5 / v1;
    let b = m1 / v1 - m2 / v2;
    let c = (w1 / w2).ln() - 0.5 * (v1 / v2).ln() - 0.5 * m1 * m1 / v1 + 0.5 * m2 * m2 / v2;

    let mut roots = Vec::new();
    if a.abs() < 1e-15 * (b.abs() + 1e-300) || a == 0.0 {
        if b != 0.0 {
            roots.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            // Numerically stable pair of roots.
            let q = -0.5 * (b + b.signum() * sq);
            if q != 0.0 {
                roots.push(q / a);
                roots.push(c / q);
            } else {
                roots.push(-b / (2.0 * a));
            }
        }
    }
    roots.retain(|x| x.is_finite() && *x > m1 && *x < m2);
    roots.sort_by(f64::total_cmp);
    match roots.first() {
        Some(&x) => Cutoff {
            value: polish_root(gmm, k, x, m1, m2),
            midpoint_fallback: false,
        },
        None => midpoint,
    }
}

/// A few bisection-safeguarded Newton steps on the log-density difference.
fn polish_root(gmm: &Gmm1D, k: usize, x0: f64, lo: f64, hi: f64) -> f64 {
    let f = |x: f64| {
        gmm.weights[k].ln() + log_normal_pdf(x, gmm.means[k], gmm.variances[k])
            - gmm.weights[k + 1].ln()
            - log_normal_pdf(x, gmm.means[k + 1], gmm.variances[k + 1])
    };
    let df = |x: f64| {
        -(x - gmm.means[k]) / gmm.variances[k] + (x - gmm.means[k + 1]) / gmm.variances[k + 1]
    };
    let mut x = x0;
    for _ in 0..4 {
        let d = df(x);
        if d == 0.0 {
            break;
        }
        let next = x - f(x) / d;
        if !(next > lo && next < hi) {
            break;
        }
        x = next;
    }
    x
}

/// Category thresholds in ms, ascending multiples of 100.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationCategorizer {
    thresholds: Vec<u32>,
}

impl Default for DurationCategorizer {
    fn default() -> Self {
        DurationCategorizer {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl DurationCategorizer {
    pub fn new(thresholds: Vec<u32>) -> Result<Self, CategoryError> {
        let ascending = thresholds.windows(2).all(|w| w[0] < w[1]);
        let valid = thresholds.iter().all(|&t| t > 0 && t % 100 == 0);
        if thresholds.is_empty() || !ascending || !valid {
            return Err(CategoryError::InvalidThresholds(thresholds));
        }
        Ok(DurationCategorizer { thresholds })
    }

    pub fn thresholds(&self) -> &[u32] {
        &self.thresholds
    }

    pub fn categories(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Maps a duration to a category in `1..=K`.
    ///
    /// The lowest threshold belongs to the category above it and, when there
    /// are two or more thresholds, the highest threshold belongs to the
    /// category below it: with `[300, 700]`, both 300 and 700 are medium.
    pub fn categorize(&self, duration_ms: u32) -> Result<u8, CategoryError> {
        if duration_ms == 0 {
            return Err(CategoryError::NonPositiveDuration);
        }
        let t = &self.thresholds;
        let last = t.len() - 1;
        let mut category = 1;
        for (i, &th) in t.iter().enumerate() {
            let above = if i == last && last > 0 {
                duration_ms > th
            } else {
                duration_ms >= th
            };
            if above {
                category = i + 2;
            }
        }
        Ok(category as u8)
    }
}

/// Rounds raw cut-offs to the nearest whole hundred (ties round up).
pub fn round_thresholds(raw: &[f64]) -> Result<DurationCategorizer, CategoryError> {
    let rounded: Vec<u32> = raw
        .iter()
        .map(|&x| ((x / 100.0 + 0.5).floor() * 100.0).max(0.0) as u32)
        .collect();
    if rounded.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CategoryError::CollapsedThresholds(rounded));
    }
    DurationCategorizer::new(rounded)
}

/// On-disk form written by `fit-categories`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizerFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub thresholds: Vec<u32>,
}

impl CategorizerFile {
    pub fn new(gmm: &Gmm1D, categorizer: &DurationCategorizer) -> Self {
        CategorizerFile {
            k: gmm.components(),
            weights: gmm.weights.clone(),
            means: gmm.means.clone(),
            variances: gmm.variances.clone(),
            thresholds: categorizer.thresholds().to_vec(),
        }
    }

    pub fn categorizer(&self) -> Result<DurationCategorizer, CategoryError> {
        DurationCategorizer::new(self.thresholds.clone())
    }
}

/// Full pipeline: fit, find cut-offs, round.
pub fn fit_categorizer(
    durations: &[f64],
    opts: FitOptions,
) -> Result<(GmmFit, Vec<Cutoff>, DurationCategorizer), CategoryError> {
    let fit = fit_gmm(durations, opts)?;
    let cutoffs = find_cutoffs(&fit.gmm)?;
    let raw: Vec<f64> = cutoffs.iter().map(|c| c.value).collect();
    let categorizer = round_thresholds(&raw)?;
    Ok((fit, cutoffs, categorizer))
}
