//! Layers built from [`Graph`] operations: affine maps, (projected,
//! peephole) LSTMs, bidirectional wrappers, splicing windows, a small
//! transformer encoder and the output heads.
//!
//! Every layer reads its parameters by name from a [`ParamSet`] under a
//! caller-chosen prefix and has a matching `init_*` function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Matrix, SeqBatch, Var};
use super::params::ParamSet;
use super::NnError;

pub fn init_linear(ps: &mut ParamSet, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) {
    ps.init_glorot(&format!("{prefix}.weight"), input, output, rng);
    ps.init_zeros(&format!("{prefix}.bias"), 1, output);
}

/// `x W + b`.
pub fn linear(g: &mut Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var, NnError> {
    let w = g.param(ps, &format!("{prefix}.weight"))?;
    let b = g.param(ps, &format!("{prefix}.bias"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Row lookup into an embedding table.
pub fn embed(g: &mut Graph, ps: &ParamSet, name: &str, ids: &[usize]) -> Result<Var, NnError> {
    let table = g.param(ps, name)?;
    g.gather_rows(table, ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Diagonal peephole connections from the cell state.
    pub peephole: bool,
    /// Recurrent projection size; the layer then outputs the projection.
    pub projection: Option<usize>,
}

impl LstmConfig {
    pub fn plain(input_dim: usize, hidden: usize) -> Self {
        LstmConfig { input_dim, hidden, peephole: false, projection: None }
    }

    /// Peephole LSTM with a recurrent projection.
    pub fn projected(input_dim: usize, hidden: usize, projection: usize) -> Self {
        LstmConfig { input_dim, hidden, peephole: true, projection: Some(projection) }
    }

    pub fn output_dim(&self) -> usize {
        self.projection.unwrap_or(self.hidden)
    }
}

/// Gate order inside the fused weights is input, forget, candidate, output.
pub fn init_lstm(ps: &mut ParamSet, prefix: &str, cfg: &LstmConfig, rng: &mut impl Rng) {
    let h = cfg.hidden;
    let r = cfg.output_dim();
    ps.init_glorot(&format!("{prefix}.w_x"), cfg.input_dim, 4 * h, rng);
    ps.init_glorot(&format!("{prefix}.w_r"), r, 4 * h, rng);
    let mut bias = Matrix::zeros((1, 4 * h));
    // forget-gate bias of 1
    bias.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
    ps.insert(format!("{prefix}.bias"), bias, true);
    if cfg.peephole {
        for gate in ["peep_i", "peep_f", "peep_o"] {
            ps.init_uniform(&format!("{prefix}.{gate}"), 1, h, 0.1, rng);
        }
    }
    if let Some(p) = cfg.projection {
        ps.init_glorot(&format!("{prefix}.proj"), h, p, rng);
    }
}

/// LSTM parameters bound to graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    w_x: Var,
    w_r: Var,
    bias: Var,
    peephole: Option<[Var; 3]>,
    proj: Option<Var>,
    cfg: LstmConfig,
}

impl LstmVars {
    pub fn bind(g: &mut Graph, ps: &ParamSet, prefix: &str, cfg: &LstmConfig) -> Result<Self, NnError> {
        let p = |g: &mut Graph, n: &str| g.param(ps, &format!("{prefix}.{n}"));
        let w_x = p(g, "w_x")?;
        let w_r = p(g, "w_r")?;
        let bias = p(g, "bias")?;
        let peephole = if cfg.peephole {
            Some([p(g, "peep_i")?, p(g, "peep_f")?, p(g, "peep_o")?])
        } else {
            None
        };
        let proj = if cfg.projection.is_some() { Some(p(g, "proj")?) } else { None };
        let expect = |v: Var, shape: (usize, usize), g: &Graph| {
            if g.shape(v) != shape {
                Err(NnError::Shape(format!("{prefix}: {:?} expected {shape:?}", g.shape(v))))
            } else {
                Ok(())
            }
        };
        let h = cfg.hidden;
        expect(w_x, (cfg.input_dim, 4 * h), g)?;
        expect(w_r, (cfg.output_dim(), 4 * h), g)?;
        Ok(LstmVars { w_x, w_r, bias, peephole, proj, cfg: *cfg })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.cfg
    }
}

/// Recurrent state: the layer output (projected when configured) and the
/// cell state.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub output: Var,
    pub cell: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, cfg: &LstmConfig) -> Self {
        let output = g.constant(Matrix::zeros((batch, cfg.output_dim())));
        let cell = g.constant(Matrix::zeros((batch, cfg.hidden)));
        LstmState { output, cell }
    }
}

/// One LSTM step on a `batch x input_dim` input.
///
/// With peepholes, the input and forget gates see the previous cell state
/// and the output gate sees the new one.
pub fn lstm_step(g: &mut Graph, vars: &LstmVars, x: Var, state: &LstmState) -> Result<LstmState, NnError> {
    if g.shape(x).1 != vars.cfg.input_dim {
        return Err(NnError::Shape(format!(
            "lstm input width {} expected {}",
            g.shape(x).1,
            vars.cfg.input_dim
        )));
    }
    let xw = g.matmul(x, vars.w_x)?;
    let gates_x = g.add_row(xw, vars.bias)?;
    lstm_cell(g, vars, gates_x, state)
}

fn lstm_cell(g: &mut Graph, vars: &LstmVars, gates_x: Var, state: &LstmState) -> Result<LstmState, NnError> {
    let h = vars.cfg.hidden;
    let rec = g.matmul(state.output, vars.w_r)?;
    let gates = g.add(gates_x, rec)?;
    let mut i_pre = g.slice_cols(gates, 0, h)?;
    let mut f_pre = g.slice_cols(gates, h, 2 * h)?;
    let c_pre = g.slice_cols(gates, 2 * h, 3 * h)?;
    let mut o_pre = g.slice_cols(gates, 3 * h, 4 * h)?;
    if let Some([pi, pf, _]) = vars.peephole {
        let ci = g.mul_row(state.cell, pi)?;
        i_pre = g.add(i_pre, ci)?;
        let cf = g.mul_row(state.cell, pf)?;
        f_pre = g.add(f_pre, cf)?;
    }
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(c_pre);
    let keep = g.mul(f, state.cell)?;
    let write = g.mul(i, cand)?;
    let cell = g.add(keep, write)?;
    if let Some([_, _, po]) = vars.peephole {
        let co = g.mul_row(cell, po)?;
        o_pre = g.add(o_pre, co)?;
    }
    let o = g.sigmoid(o_pre);
    let squashed = g.tanh(cell);
    let hidden = g.mul(o, squashed)?;
    let output = match vars.proj {
        Some(p) => g.matmul(hidden, p)?,
        None => hidden,
    };
    Ok(LstmState { output, cell })
}

/// Runs an LSTM over every sentence of the batch, left to right or right to
/// left. Padding positions carry the state through unchanged, so a reversed
/// pass starts each sentence from the zero state at its last real token.
pub fn lstm_sequence(g: &mut Graph, vars: &LstmVars, x: Var, batch: &SeqBatch, reverse: bool) -> Result<Var, NnError> {
    if batch.max_len == 0 || batch.lens.contains(&0) {
        return Err(NnError::EmptySequence);
    }
    if g.shape(x).0 != batch.rows() {
        return Err(NnError::Shape(format!("lstm: {} rows for batch of {}", g.shape(x).0, batch.rows())));
    }
    let xw = g.matmul(x, vars.w_x)?;
    let gates_x = g.add_row(xw, vars.bias)?;
    let b = batch.batch();
    let mut state = LstmState::zeros(g, b, &vars.cfg);
    let mut outputs = vec![state.output; batch.max_len];
    let steps: Vec<usize> = if reverse {
        (0..batch.max_len).rev().collect()
    } else {
        (0..batch.max_len).collect()
    };
    for t in steps {
        let rows: Vec<usize> = (0..b).map(|s| batch.row(s, t)).collect();
        let gx = g.gather_rows(gates_x, &rows)?;
        let next = lstm_cell(g, vars, gx, &state)?;
        state = if batch.lens.iter().all(|&len| t < len) {
            next
        } else {
            let live: Vec<f64> = batch.lens.iter().map(|&len| if t < len { 1.0 } else { 0.0 }).collect();
            LstmState {
                output: carry(g, next.output, state.output, &live)?,
                cell: carry(g, next.cell, state.cell, &live)?,
            }
        };
        outputs[t] = state.output;
    }
    g.interleave_steps(&outputs)
}

/// `live ? new : old`, row by row.
fn carry(g: &mut Graph, new: Var, old: Var, live: &[f64]) -> Result<Var, NnError> {
    let cols = g.shape(new).1;
    let keep = Matrix::from_shape_fn((live.len(), cols), |(r, _)| live[r]);
    let drop = keep.mapv(|v| 1.0 - v);
    let keep = g.constant(keep);
    let drop = g.constant(drop);
    let a = g.mul(new, keep)?;
    let b = g.mul(old, drop)?;
    g.add(a, b)
}

pub fn init_bilstm(ps: &mut ParamSet, prefix: &str, cfg: &LstmConfig, rng: &mut impl Rng) {
    init_lstm(ps, &format!("{prefix}.fw"), cfg, rng);
    init_lstm(ps, &format!("{prefix}.bw"), cfg, rng);
}

/// Forward and backward passes concatenated per position:
/// `rows x 2 * output_dim`.
pub fn bilstm_forward(
    g: &mut Graph,
    ps: &ParamSet,
    prefix: &str,
    cfg: &LstmConfig,
    x: Var,
    batch: &SeqBatch,
) -> Result<Var, NnError> {
    let fw = LstmVars::bind(g, ps, &format!("{prefix}.fw"), cfg)?;
    let bw = LstmVars::bind(g, ps, &format!("{prefix}.bw"), cfg)?;
    let forward = lstm_sequence(g, &fw, x, batch, false)?;
    let backward = lstm_sequence(g, &bw, x, batch, true)?;
    g.concat_cols(&[forward, backward])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub positional: Positional,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(NnError::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return Err(NnError::Config("transformer dimensions must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_transformer(ps: &mut ParamSet, prefix: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Result<(), NnError> {
    cfg.validate()?;
    let d = cfg.model_dim;
    ps.init_normal(&format!("{prefix}.tok_emb"), cfg.vocab_size, d, 1.0 / (d as f64).sqrt(), rng);
    init_layer_norm(ps, &format!("{prefix}.emb_ln"), d);
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        for name in ["q", "k", "v", "o"] {
            init_linear(ps, &format!("{p}.{name}"), d, d, rng);
        }
        init_layer_norm(ps, &format!("{p}.ln1"), d);
        init_linear(ps, &format!("{p}.ff1"), d, cfg.ff_dim, rng);
        init_linear(ps, &format!("{p}.ff2"), cfg.ff_dim, d, rng);
        init_layer_norm(ps, &format!("{p}.ln2"), d);
    }
    Ok(())
}

pub fn init_layer_norm(ps: &mut ParamSet, prefix: &str, dim: usize) {
    ps.init_ones(&format!("{prefix}.gamma"), 1, dim);
    ps.init_zeros(&format!("{prefix}.beta"), 1, dim);
}

pub fn layer_norm(g: &mut Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var, NnError> {
    let gamma = g.param(ps, &format!("{prefix}.gamma"))?;
    let beta = g.param(ps, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Sinusoidal position table laid out like the batch.
pub fn sinusoidal_positions(batch: &SeqBatch, dim: usize) -> Matrix {
    Matrix::from_shape_fn((batch.rows(), dim), |(r, i)| {
        let t = (r % batch.max_len.max(1)) as f64;
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        if i % 2 == 0 {
            (t * rate).sin()
        } else {
            (t * rate).cos()
        }
    })
}

/// One post-norm encoder block: self-attention and a GELU feed-forward
/// network, each wrapped in a residual connection and layer normalization.
pub fn transformer_block(
    g: &mut Graph,
    ps: &ParamSet,
    prefix: &str,
    heads: usize,
    x: Var,
    batch: &SeqBatch,
) -> Result<Var, NnError> {
    let q = linear(g, ps, &format!("{prefix}.q"), x)?;
    let k = linear(g, ps, &format!("{prefix}.k"), x)?;
    let v = linear(g, ps, &format!("{prefix}.v"), x)?;
    let att = g.attention(q, k, v, heads, batch)?;
    let att = linear(g, ps, &format!("{prefix}.o"), att)?;
    let res = g.add(x, att)?;
    let h = layer_norm(g, ps, &format!("{prefix}.ln1"), res)?;
    let ff = linear(g, ps, &format!("{prefix}.ff1"), h)?;
    let ff = g.gelu(ff);
    let ff = linear(g, ps, &format!("{prefix}.ff2"), ff)?;
    let res = g.add(h, ff)?;
    layer_norm(g, ps, &format!("{prefix}.ln2"), res)
}

/// Token embeddings, optional sinusoidal positions, then `layers` blocks.
/// Output is `rows x model_dim`. Whether the encoder is fine-tuned is
/// decided by the trainable flags of its parameters.
pub fn transformer_encode(
    g: &mut Graph,
    ps: &ParamSet,
    prefix: &str,
    cfg: &TransformerConfig,
    ids: &[usize],
    batch: &SeqBatch,
) -> Result<Var, NnError> {
    cfg.validate()?;
    if ids.len() != batch.rows() {
        return Err(NnError::Shape(format!("{} ids for batch of {}", ids.len(), batch.rows())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(NnError::Shape(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let mut x = embed(g, ps, &format!("{prefix}.tok_emb"), ids)?;
    if cfg.positional == Positional::Sinusoidal {
        let pos = g.constant(sinusoidal_positions(batch, cfg.model_dim));
        x = g.add(x, pos)?;
    }
    x = layer_norm(g, ps, &format!("{prefix}.emb_ln"), x)?;
    for l in 0..cfg.layers {
        x = transformer_block(g, ps, &format!("{prefix}.l{l}"), cfg.heads, x, batch)?;
    }
    Ok(x)
}

/// Per-position probability: `sigmoid(x W + b)`, `rows x 1`.
pub fn sigmoid_head(g: &mut Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var, NnError> {
    let z = linear(g, ps, prefix, x)?;
    Ok(g.sigmoid(z))
}

/// Per-position class logits and their softmax.
pub fn softmax_head(g: &mut Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<(Var, Var), NnError> {
    let logits = linear(g, ps, prefix, x)?;
    let probs = g.softmax_rows(logits);
    Ok((logits, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = LstmConfig::projected(3, 4, 2);
        let mut ps = ParamSet::new();
        init_lstm(&mut ps, "l", &cfg, &mut rng(1));
        for (_, p) in ps.iter_mut() {
            p.value.fill(0.0);
        }
        let mut g = Graph::new();
        let vars = LstmVars::bind(&mut g, &ps, "l", &cfg).unwrap();
        let x = g.constant(array![[1.0, -2.0, 0.5]]);
        let s0 = LstmState::zeros(&mut g, 1, &cfg);
        let s1 = lstm_step(&mut g, &vars, x, &s0).unwrap();
        assert!(g.value(s1.output).iter().all(|&v| v == 0.0));
        assert!(g.value(s1.cell).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_by_hand() {
        // one input, one hidden unit, peepholes on, no projection
        let cfg = LstmConfig { input_dim: 1, hidden: 1, peephole: true, projection: None };
        let mut ps = ParamSet::new();
        ps.insert("c.w_x", array![[0.5, -0.3, 0.8, 0.2]], true);
        ps.insert("c.w_r", array![[0.1, 0.4, -0.6, 0.3]], true);
        ps.insert("c.bias", array![[0.05, 1.0, -0.1, 0.2]], true);
        ps.insert("c.peep_i", array![[0.3]], true);
        ps.insert("c.peep_f", array![[-0.2]], true);
        ps.insert("c.peep_o", array![[0.7]], true);
        let mut g = Graph::new();
        let vars = LstmVars::bind(&mut g, &ps, "c", &cfg).unwrap();
        let x = g.constant(array![[2.0]]);
        let state = LstmState {
            output: g.constant(array![[0.5]]),
            cell: g.constant(array![[-1.0]]),
        };
        let next = lstm_step(&mut g, &vars, x, &state).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (xv, hp, cp) = (2.0, 0.5, -1.0);
        let i = sig(0.5 * xv + 0.1 * hp + 0.05 + 0.3 * cp);
        let f = sig(-0.3 * xv + 0.4 * hp + 1.0 - 0.2 * cp);
        let cand = (0.8 * xv - 0.6 * hp - 0.1f64).tanh();
        let c = f * cp + i * cand;
        let o = sig(0.2 * xv + 0.3 * hp + 0.2 + 0.7 * c);
        let h = o * c.tanh();
        assert!((g.value(next.cell)[[0, 0]] - c).abs() < 1e-12);
        assert!((g.value(next.output)[[0, 0]] - h).abs() < 1e-12);
    }

    #[test]
    fn identity_projection_matches_plain_step() {
        let plain = LstmConfig { input_dim: 3, hidden: 4, peephole: true, projection: None };
        let proj = LstmConfig { projection: Some(4), ..plain };
        let mut ps = ParamSet::new();
        init_lstm(&mut ps, "p", &proj, &mut rng(3));
        ps.insert("p.proj", Matrix::eye(4), true);
        let mut g = Graph::new();
        let a = LstmVars::bind(&mut g, &ps, "p", &plain).unwrap();
        let b = LstmVars::bind(&mut g, &ps, "p", &proj).unwrap();
        let x = g.constant(array![[0.3, -0.7, 1.1]]);
        let s0 = LstmState::zeros(&mut g, 1, &plain);
        let ya = lstm_step(&mut g, &a, x, &s0).unwrap();
        let yb = lstm_step(&mut g, &b, x, &s0).unwrap();
        let ya2 = lstm_step(&mut g, &a, x, &ya).unwrap();
        let yb2 = lstm_step(&mut g, &b, x, &yb).unwrap();
        assert_eq!(g.value(ya2.output), g.value(yb2.output));
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng(seed);
        Matrix::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn bilstm_halves() {
        let cfg = LstmConfig::projected(3, 5, 2);
        let mut ps = ParamSet::new();
        init_bilstm(&mut ps, "b", &cfg, &mut rng(4));
        let xs = random_input(6, 3, 5);
        let batch = SeqBatch::single(6);

        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let y = bilstm_forward(&mut g, &ps, "b", &cfg, x, &batch).unwrap();
        assert_eq!(g.shape(y), (6, 4));
        let fw = LstmVars::bind(&mut g, &ps, "b.fw", &cfg).unwrap();
        let uni = lstm_sequence(&mut g, &fw, x, &batch, false).unwrap();
        assert_eq!(g.value(y).slice(ndarray::s![.., 0..2]), g.value(uni));

        // reversing the input with fw/bw parameters swapped swaps the halves
        let mut swapped = ParamSet::new();
        for (name, p) in ps.iter() {
            let new = if let Some(rest) = name.strip_prefix("b.fw") {
                format!("b.bw{rest}")
            } else {
                format!("b.fw{}", name.strip_prefix("b.bw").unwrap())
            };
            swapped.insert(new, p.value.clone(), true);
        }
        let rev = Matrix::from_shape_fn((6, 3), |(r, c)| xs[[5 - r, c]]);
        let mut g2 = Graph::new();
        let xr = g2.constant(rev);
        let yr = bilstm_forward(&mut g2, &swapped, "b", &cfg, xr, &batch).unwrap();
        for t in 0..6 {
            for j in 0..2 {
                let a = g.value(y)[[t, j]];
                let b = g2.value(yr)[[5 - t, j + 2]];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_single_position_and_empty() {
        let cfg = LstmConfig::plain(2, 3);
        let mut ps = ParamSet::new();
        init_bilstm(&mut ps, "b", &cfg, &mut rng(6));
        let mut g = Graph::new();
        let x = g.constant(array![[0.4, -0.2]]);
        let y = bilstm_forward(&mut g, &ps, "b", &cfg, x, &SeqBatch::single(1)).unwrap();
        let fw = LstmVars::bind(&mut g, &ps, "b.fw", &cfg).unwrap();
        let bw = LstmVars::bind(&mut g, &ps, "b.bw", &cfg).unwrap();
        let s0 = LstmState::zeros(&mut g, 1, &cfg);
        let a = lstm_step(&mut g, &fw, x, &s0).unwrap();
        let b = lstm_step(&mut g, &bw, x, &s0).unwrap();
        let expect = ndarray::concatenate![ndarray::Axis(1), *g.value(a.output), *g.value(b.output)];
        assert!((g.value(y) - &expect).iter().all(|d| d.abs() < 1e-12));

        let empty = g.constant(Matrix::zeros((0, 2)));
        assert!(matches!(
            bilstm_forward(&mut g, &ps, "b", &cfg, empty, &SeqBatch::new(vec![])),
            Err(NnError::EmptySequence)
        ));
    }

    #[test]
    fn padded_batch_matches_individual_sentences() {
        let cfg = LstmConfig::projected(3, 4, 2);
        let mut ps = ParamSet::new();
        init_bilstm(&mut ps, "b", &cfg, &mut rng(8));
        let s0 = random_input(5, 3, 9);
        let s1 = random_input(2, 3, 10);
        let mut packed = Matrix::zeros((10, 3));
        packed.slice_mut(ndarray::s![0..5, ..]).assign(&s0);
        packed.slice_mut(ndarray::s![5..7, ..]).assign(&s1);

        let mut g = Graph::new();
        let x = g.constant(packed);
        let y = bilstm_forward(&mut g, &ps, "b", &cfg, x, &SeqBatch::new(vec![5, 2])).unwrap();
        for (rows, offset, single) in [(5usize, 0usize, s0), (2, 5, s1)] {
            let mut gs = Graph::new();
            let xs = gs.constant(single);
            let ys = bilstm_forward(&mut gs, &ps, "b", &cfg, xs, &SeqBatch::single(rows)).unwrap();
            for t in 0..rows {
                for j in 0..4 {
                    assert!((g.value(y)[[offset + t, j]] - gs.value(ys)[[t, j]]).abs() < 1e-12);
                }
            }
        }
    }

    fn tiny_transformer(positional: Positional) -> (TransformerConfig, ParamSet) {
        let cfg = TransformerConfig { vocab_size: 7, layers: 2, heads: 2, model_dim: 8, ff_dim: 12, positional };
        let mut ps = ParamSet::new();
        init_transformer(&mut ps, "enc", &cfg, &mut rng(11)).unwrap();
        (cfg, ps)
    }

    #[test]
    fn transformer_shape_and_divisibility() {
        let (cfg, ps) = tiny_transformer(Positional::Sinusoidal);
        let mut g = Graph::new();
        let batch = SeqBatch::single(5);
        let y = transformer_encode(&mut g, &ps, "enc", &cfg, &[1, 2, 3, 4, 5], &batch).unwrap();
        assert_eq!(g.shape(y), (5, 8));
        let bad = TransformerConfig { heads: 3, ..cfg };
        assert!(matches!(transformer_encode(&mut g, &ps, "enc", &bad, &[1; 5], &batch), Err(NnError::Config(_))));
    }

    #[test]
    fn single_position_attention_is_value_path() {
        let (cfg, ps) = tiny_transformer(Positional::Sinusoidal);
        let batch = SeqBatch::single(1);
        let mut g = Graph::new();
        let y = transformer_encode(&mut g, &ps, "enc", &cfg, &[3], &batch).unwrap();

        // same computation with attention replaced by the value projection
        let mut h = Graph::new();
        let mut x = embed(&mut h, &ps, "enc.tok_emb", &[3]).unwrap();
        let pos = h.constant(sinusoidal_positions(&batch, 8));
        x = h.add(x, pos).unwrap();
        x = layer_norm(&mut h, &ps, "enc.emb_ln", x).unwrap();
        for l in 0..2 {
            let p = format!("enc.l{l}");
            let v = linear(&mut h, &ps, &format!("{p}.v"), x).unwrap();
            let att = linear(&mut h, &ps, &format!("{p}.o"), v).unwrap();
            let res = h.add(x, att).unwrap();
            let n1 = layer_norm(&mut h, &ps, &format!("{p}.ln1"), res).unwrap();
            let ff = linear(&mut h, &ps, &format!("{p}.ff1"), n1).unwrap();
            let ff = h.gelu(ff);
            let ff = linear(&mut h, &ps, &format!("{p}.ff2"), ff).unwrap();
            let res = h.add(n1, ff).unwrap();
            x = layer_norm(&mut h, &ps, &format!("{p}.ln2"), res).unwrap();
        }
        let diff = (g.value(y) - h.value(x)).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let (cfg, ps) = tiny_transformer(Positional::None);
        let ids = [1, 4, 2, 6, 0];
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
        let batch = SeqBatch::single(5);
        let mut g = Graph::new();
        let y = transformer_encode(&mut g, &ps, "enc", &cfg, &ids, &batch).unwrap();
        let yp = transformer_encode(&mut g, &ps, "enc", &cfg, &permuted, &batch).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((g.value(yp)[[i, j]] - g.value(y)[[p, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splice_center_block_is_identity() {
        let xs = random_input(4, 3, 12);
        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let y = g.splice(x, 7, &SeqBatch::single(4)).unwrap();
        assert_eq!(g.shape(y), (4, 15 * 3));
        assert_eq!(g.value(y).slice(ndarray::s![.., 21..24]), xs);
    }

    #[test]
    fn heads_output_ranges() {
        let mut ps = ParamSet::new();
        init_linear(&mut ps, "p", 3, 1, &mut rng(13));
        init_linear(&mut ps, "c", 3, 4, &mut rng(14));
        let mut g = Graph::new();
        let x = g.constant(random_input(5, 3, 15));
        let p = sigmoid_head(&mut g, &ps, "p", x).unwrap();
        assert!(g.value(p).iter().all(|&v| v > 0.0 && v < 1.0));
        let (_, c) = softmax_head(&mut g, &ps, "c", x).unwrap();
        for row in g.value(c).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
