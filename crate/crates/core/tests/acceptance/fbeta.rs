//! F-beta against reference precision/recall/F triples.

use pausekit::evalkit::f_beta;

use crate::report;

pub const TOLERANCE: f64 = 0.001;

pub fn triples() -> bool {
    let cases = [(0.569, 0.272, 0.5, 0.467), (0.848, 0.996, 2.0, 0.962), (0.393, 0.187, 0.5, 0.322)];
    let mut worst: f64 = 0.0;
    for (p, r, beta, expected) in cases {
        let f = f_beta(p, r, beta).expect("valid inputs");
        worst = worst.max((f - expected).abs());
    }
    report("F-beta fidelity", worst <= TOLERANCE, &format!("max deviation {worst:.5} over 3 triples (tolerance {TOLERANCE})"))
}
