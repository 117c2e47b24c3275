//! Central finite-difference checks for every layer of the nncore zoo.

use pausekit::nncore::gradcheck::{check_gradients, GradCheck};
use pausekit::nncore::layers::{
    bilstm_forward, init_bilstm, init_linear, init_lstm, init_transformer, lstm_sequence, sigmoid_head,
    softmax_head, transformer_block, transformer_encode, LstmConfig, LstmVars, Positional, TransformerConfig,
};
use pausekit::nncore::{Graph, Matrix, NnError, ParamSet, SeqBatch, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report;

pub const SEEDS: u64 = 20;
pub const MAX_REL_ERROR: f64 = 1e-4;
const EPS: f64 = 1e-5;
// Gradients that vanish identically (key biases under softmax shift
// invariance) leave only finite-difference round-off, about 1e-10 here.
const FLOOR: f64 = 1e-5;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Projects a layer output to a scalar with a fixed random matrix, masking
/// padded rows.
fn project(g: &mut Graph, out: Var, weights: &Matrix) -> Result<Var, NnError> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn masked_projection(batch: &SeqBatch, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mask = batch.mask();
    let mut m = random(batch.rows(), cols, rng);
    for (r, &keep) in mask.iter().enumerate() {
        m.row_mut(r).mapv_inplace(|v| v * keep);
    }
    m
}

fn run<F>(name: &str, mut case: F) -> f64
where
    F: FnMut(u64) -> GradCheck,
{
    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    for seed in 0..SEEDS {
        let r = case(seed);
        assert!(r.checked > 0);
        if r.max_rel_error > worst {
            worst = r.max_rel_error;
            where_ = format!("seed {seed} {}", r.worst_param);
        }
    }
    println!("    {name:<28} max rel error {worst:.2e} ({where_})");
    worst
}

fn lstm_case(seed: u64, cfg: LstmConfig) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = SeqBatch::new(vec![4, 2]);
    let mut ps = ParamSet::new();
    init_lstm(&mut ps, "l", &cfg, &mut rng);
    ps.insert("x", random(batch.rows(), cfg.input_dim, &mut rng), true);
    let proj = masked_projection(&batch, cfg.output_dim(), &mut rng);
    check_gradients(&ps, EPS, FLOOR, |g, ps| {
        let vars = LstmVars::bind(g, ps, "l", &cfg)?;
        let x = g.param(ps, "x")?;
        let y = lstm_sequence(g, &vars, x, &batch, seed % 2 == 1)?;
        project(g, y, &proj)
    })
    .unwrap()
}

pub fn lstm() -> f64 {
    run("lstm", |s| lstm_case(s, LstmConfig::plain(3, 4)))
}

pub fn peephole_projection_lstm() -> f64 {
    run("peephole-projection lstm", |s| lstm_case(s, LstmConfig::projected(3, 4, 2)))
}

pub fn bilstm() -> f64 {
    run("bilstm", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LstmConfig::projected(3, 3, 2);
        let batch = SeqBatch::new(vec![3, 1, 2]);
        let mut ps = ParamSet::new();
        init_bilstm(&mut ps, "b", &cfg, &mut rng);
        ps.insert("x", random(batch.rows(), 3, &mut rng), true);
        let proj = masked_projection(&batch, 4, &mut rng);
        check_gradients(&ps, EPS, FLOOR, |g, ps| {
            let x = g.param(ps, "x")?;
            let y = bilstm_forward(g, ps, "b", &cfg, x, &batch)?;
            project(g, y, &proj)
        })
        .unwrap()
    })
}

pub fn splice_window() -> f64 {
    run("splice window", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = SeqBatch::new(vec![5, 3]);
        let w = 1 + (seed as usize % 3);
        let mut ps = ParamSet::new();
        ps.insert("x", random(batch.rows(), 2, &mut rng), true);
        let proj = masked_projection(&batch, 2 * (2 * w + 1), &mut rng);
        check_gradients(&ps, EPS, FLOOR, |g, ps| {
            let x = g.param(ps, "x")?;
            let y = g.splice(x, w, &batch)?;
            // square to make the check non-linear in x
            let y2 = g.mul(y, y)?;
            project(g, y2, &proj)
        })
        .unwrap()
    })
}

pub fn transformer() -> f64 {
    run("transformer block", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TransformerConfig {
            vocab_size: 6,
            layers: 1,
            heads: 2,
            model_dim: 4,
            ff_dim: 6,
            positional: Positional::Sinusoidal,
        };
        let batch = SeqBatch::new(vec![3, 2]);
        let mut ps = ParamSet::new();
        init_transformer(&mut ps, "t", &cfg, &mut rng).unwrap();
        // perturb norms away from the identity initialization
        for (name, p) in ps.iter_mut() {
            if name.contains("ln") {
                p.value.mapv_inplace(|v| v + 0.3 * (v + 0.7).sin());
            }
        }
        ps.insert("x", random(batch.rows(), 4, &mut rng), true);
        let ids: Vec<usize> = (0..batch.rows()).map(|_| rng.random_range(0..6)).collect();
        let proj = masked_projection(&batch, 4, &mut rng);
        let proj2 = proj.clone();
        let a = check_gradients(&ps, EPS, FLOOR, |g, ps| {
            let x = g.param(ps, "x")?;
            let y = transformer_block(g, ps, "t.l0", 2, x, &batch)?;
            project(g, y, &proj)
        })
        .unwrap();
        let b = check_gradients(&ps, EPS, FLOOR, |g, ps| {
            let y = transformer_encode(g, ps, "t", &cfg, &ids, &batch)?;
            project(g, y, &proj2)
        })
        .unwrap();
        if a.max_rel_error >= b.max_rel_error { a } else { b }
    })
}

pub fn bce() -> f64 {
    run("bce loss", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let mut ps = ParamSet::new();
        ps.insert("p", Matrix::from_shape_fn((n, 1), |_| rng.random_range(0.05..0.95)), true);
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let mut mask = vec![1.0; n];
        mask[seed as usize % n] = 0.0;
        check_gradients(&ps, EPS, FLOOR, |g, ps| {
            let p = g.param(ps, "p")?;
            g.bce(p, &targets, &mask)
        })
        .unwrap()
    })
}

pub fn wce() -> f64 {
    run("wce loss", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let mut ps = ParamSet::new();
        ps.insert("z", random(n, 4, &mut rng) * 2.0, true);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let weights = [1.0, 65.5, 12.0, 1.0];
        let mut mask = vec![1.0; n];
        mask[seed as usize % n] = 0.0;
        check_gradients(&ps, EPS, FLOOR, |g, ps| {
            let z = g.param(ps, "z")?;
            g.wce(z, &targets, &weights, &mask)
        })
        .unwrap()
    })
}

pub fn sigmoid_output_head() -> f64 {
    run("sigmoid head", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_linear(&mut ps, "h", 5, 1, &mut rng);
        ps.insert("x", random(4, 5, &mut rng), true);
        let targets: Vec<f64> = (0..4).map(|_| rng.random_range(0..2) as f64).collect();
        check_gradients(&ps, EPS, FLOOR, |g, ps| {
            let x = g.param(ps, "x")?;
            let p = sigmoid_head(g, ps, "h", x)?;
            g.bce(p, &targets, &[1.0; 4])
        })
        .unwrap()
    })
}

pub fn softmax_output_head() -> f64 {
    run("softmax head", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_linear(&mut ps, "h", 5, 4, &mut rng);
        ps.insert("x", random(4, 5, &mut rng), true);
        let proj = random(4, 4, &mut rng);
        check_gradients(&ps, EPS, FLOOR, |g, ps| {
            let x = g.param(ps, "x")?;
            let (_, probs) = softmax_head(g, ps, "h", x)?;
            project(g, probs, &proj)
        })
        .unwrap()
    })
}

pub fn all_layers() -> bool {
    let results = [
        lstm(),
        peephole_projection_lstm(),
        bilstm(),
        splice_window(),
        transformer(),
        bce(),
        wce(),
        sigmoid_output_head(),
        softmax_output_head(),
    ];
    let worst = results.iter().copied().fold(0.0, f64::max);
    report(
        "Gradient correctness",
        worst < MAX_REL_ERROR,
        &format!("worst relative error {worst:.2e} over {SEEDS} seeds per layer (limit {MAX_REL_ERROR:.0e})"),
    )
}
