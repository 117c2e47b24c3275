//! EM monotonicity and threshold recovery on planted mixtures.

use pausekit::pausecat::{fit_categorizer, fit_gmm, FitOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::report;

pub const DATASETS: u64 = 100;
pub const LL_TOLERANCE: f64 = 1e-9;
pub const THRESHOLD_SLACK: i64 = 100;
pub const REQUIRED_RECOVERIES: usize = 95;

fn random_dataset(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let parts = rng.random_range(1..5);
    let n = rng.random_range(50..1500);
    let mut data = Vec::with_capacity(n);
    let centers: Vec<(f64, f64)> = (0..parts).map(|_| (rng.random_range(3.5..7.0), rng.random_range(0.05..0.6))).collect();
    for _ in 0..n {
        let (mu, sigma) = centers[rng.random_range(0..parts)];
        data.push(LogNormal::new(mu, sigma).unwrap().sample(rng));
    }
    (data, rng.random_range(2..5))
}

pub fn monotone() -> bool {
    let mut worst_drop: f64 = 0.0;
    let mut traces = 0;
    for seed in 0..DATASETS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (data, components) = random_dataset(&mut rng);
        let fit = fit_gmm(&data, FitOptions { components, ..Default::default() }).expect("fit");
        for w in fit.log_likelihood.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
        traces += 1;
    }
    report(
        "GMM log-likelihood monotone",
        worst_drop <= LL_TOLERANCE,
        &format!("largest decrease {worst_drop:.2e} over {traces} datasets (tolerance {LL_TOLERANCE:e})"),
    )
}

pub fn planted() -> bool {
    let comps: [(f64, f64, f64); 3] = [(0.40, 180.0, 45.0), (0.35, 500.0, 70.0), (0.25, 900.0, 90.0)];
    let mut recovered = 0;
    let mut misses = Vec::new();
    for seed in 0..DATASETS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let data: Vec<f64> = (0..3000)
            .map(|_| {
                let u: f64 = rng.random();
                let (_, m, s) = if u < comps[0].0 {
                    comps[0]
                } else if u < comps[0].0 + comps[1].0 {
                    comps[1]
                } else {
                    comps[2]
                };
                Normal::new(m, s).unwrap().sample(&mut rng).max(1.0)
            })
            .collect();
        let (_, _, cat) = fit_categorizer(&data, FitOptions::default()).expect("fit");
        let t = cat.thresholds();
        if t.len() == 2 && (t[0] as i64 - 300).abs() <= THRESHOLD_SLACK && (t[1] as i64 - 700).abs() <= THRESHOLD_SLACK {
            recovered += 1;
        } else {
            misses.push(t.to_vec());
        }
    }
    report(
        "GMM planted thresholds",
        recovered >= REQUIRED_RECOVERIES,
        &format!("{recovered}/{DATASETS} runs within {THRESHOLD_SLACK} ms of (300, 700); misses {misses:?}"),
    )
}
