//! Recorded computation graph over dense matrices with reverse-mode
//! gradients.
//!
//! Every value is a row-major `f64` matrix. Sequence batches use the layout
//! described by [`SeqBatch`]: row `b * max_len + t` holds position `t` of
//! sentence `b`. Nodes that do not depend on a trainable parameter are never
//! visited by [`Graph::backward`].

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis, Zip};

use super::params::ParamSet;
use super::NnError;

pub type Matrix = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape of a padded batch of sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub lens: Vec<usize>,
    pub max_len: usize,
}

impl SeqBatch {
    pub fn new(lens: Vec<usize>) -> Self {
        let max_len = lens.iter().copied().max().unwrap_or(0);
        SeqBatch { lens, max_len }
    }

    pub fn single(len: usize) -> Self {
        SeqBatch::new(vec![len])
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.max_len
    }

    pub fn row(&self, sentence: usize, pos: usize) -> usize {
        sentence * self.max_len + pos
    }

    /// 1.0 on real positions, 0.0 on padding, one entry per row.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.rows()];
        for (b, &len) in self.lens.iter().enumerate() {
            for t in 0..len {
                m[self.row(b, t)] = 1.0;
            }
        }
        m
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    InterleaveSteps { parts: Vec<Var>, steps: usize },
    Splice { input: Var, window: usize, batch: SeqBatch },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, batch: SeqBatch, probs: Vec<Matrix> },
    Sum(Var),
    Bce { probs: Var, targets: Vec<f64>, mask: Vec<f64> },
    Wce { logits: Var, targets: Vec<usize>, weights: Vec<f64>, mask: Vec<f64>, softmax: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Gradients of the trainable parameters, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub map: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, name by name.
    pub fn accumulate(&mut self, other: Gradients) {
        for (name, g) in other.map {
            match self.map.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.map.insert(name, g);
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NnError {
    NnError::Shape(format!("{op}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a named parameter. Repeated lookups return the same node.
    /// Frozen parameters become constants.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var, NnError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = params
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        let v = self.push(p.value.clone(), Op::Param(name.to_string()), p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<(), NnError> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(NnError::NonFinite(what.to_string()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    fn row_check(&self, op: &str, a: Var, row: Var) -> Result<(), NnError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err(op, &[sa.0, sa.1], &[sr.0, sr.1]));
        }
        Ok(())
    }

    /// `a + row`, with the 1xd `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_check("add_row", a, row)?;
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// `a * row` element-wise, with the 1xd `row` broadcast.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_check("mul_row", a, row)?;
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::MulRow(a, row), ng))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(NnError::Shape("concat_cols: row counts differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let cols = self.shape(a).1;
        if start >= end || end > cols {
            return Err(NnError::Shape(format!("slice_cols {start}..{end} of {cols}")));
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    /// Row `i` of the output is row `indices[i]` of `a`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NnError> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NnError::Shape(format!("gather_rows index {bad} of {rows}")));
        }
        let src = self.value(a);
        let mut value = Matrix::zeros((indices.len(), cols));
        for (i, &r) in indices.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), ng))
    }

    /// Reassembles per-step `batch x d` matrices into sequence layout: row
    /// `b * steps + t` of the output is row `b` of `parts[t]`.
    pub fn interleave_steps(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let steps = parts.len();
        let (batch, cols) = self.shape(parts[0]);
        if parts.iter().any(|&p| self.shape(p) != (batch, cols)) {
            return Err(NnError::Shape("interleave_steps: step shapes differ".into()));
        }
        let mut value = Matrix::zeros((batch * steps, cols));
        for (t, &p) in parts.iter().enumerate() {
            let src = self.value(p);
            for b in 0..batch {
                value.row_mut(b * steps + t).assign(&src.row(b));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::InterleaveSteps { parts: parts.to_vec(), steps }, ng))
    }

    /// Stacks frames `t - window ..= t + window` of each sentence; positions
    /// outside the sentence contribute zeros.
    pub fn splice(&mut self, input: Var, window: usize, batch: &SeqBatch) -> Result<Var, NnError> {
        let (rows, d) = self.shape(input);
        if rows != batch.rows() {
            return Err(NnError::Shape(format!("splice: {rows} rows for batch of {}", batch.rows())));
        }
        let width = 2 * window + 1;
        let src = self.value(input);
        let mut value = Matrix::zeros((rows, width * d));
        for (b, &len) in batch.lens.iter().enumerate() {
            for t in 0..batch.max_len {
                let out_row = batch.row(b, t);
                for j in 0..width {
                    let Some(st) = (t + j).checked_sub(window) else { continue };
                    if st >= len {
                        continue;
                    }
                    value
                        .slice_mut(s![out_row, j * d..(j + 1) * d])
                        .assign(&src.row(batch.row(b, st)));
                }
            }
        }
        let ng = self.ng(input);
        Ok(self.push(value, Op::Splice { input, window, batch: batch.clone() }, ng))
    }

    /// Row-wise layer normalization with learned gain and bias (1xd each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        self.row_check("layer_norm", x, gamma)?;
        self.row_check("layer_norm", x, beta)?;
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Multi-head scaled dot-product self-attention over each sentence of
    /// the batch; padded key positions are masked out.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: &SeqBatch) -> Result<Var, NnError> {
        let (rows, dim) = self.shape(q);
        if self.shape(k) != (rows, dim) || self.shape(v) != (rows, dim) || rows != batch.rows() {
            return Err(NnError::Shape("attention: q/k/v shapes disagree with batch".into()));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        let dk = dim / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let t = batch.max_len;
        let mut out = Matrix::zeros((rows, dim));
        let mut probs = Vec::with_capacity(batch.batch() * heads);
        for (b, &len) in batch.lens.iter().enumerate() {
            let r = b * t..(b + 1) * t;
            for h in 0..heads {
                let c = h * dk..(h + 1) * dk;
                let qb = self.value(q).slice(s![r.clone(), c.clone()]);
                let kb = self.value(k).slice(s![r.clone(), c.clone()]);
                let vb = self.value(v).slice(s![r.clone(), c.clone()]);
                let mut scores = qb.dot(&kb.t()) * scale;
                for mut row in scores.rows_mut() {
                    for j in len..t {
                        row[j] = f64::NEG_INFINITY;
                    }
                }
                let p = softmax_rows(&scores);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, batch: batch.clone(), probs }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Mean binary cross-entropy over unmasked rows of an Nx1 probability
    /// column; probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, probs: Var, targets: &[f64], mask: &[f64]) -> Result<Var, NnError> {
        let (rows, cols) = self.shape(probs);
        if cols != 1 || targets.len() != rows || mask.len() != rows {
            return Err(NnError::Shape(format!(
                "bce: probs {rows}x{cols}, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(y) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(NnError::Target(format!("binary target {y}")));
        }
        let count: f64 = mask.iter().sum();
        if count <= 0.0 {
            return Err(NnError::Target("every position is masked".into()));
        }
        let p = self.value(probs);
        let mut total = 0.0;
        for i in 0..rows {
            if mask[i] == 0.0 {
                continue;
            }
            let pi = p[[i, 0]].clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = targets[i];
            total -= mask[i] * (y * pi.ln() + (1.0 - y) * (1.0 - pi).ln());
        }
        let value = Matrix::from_elem((1, 1), total / count);
        let ng = self.ng(probs);
        Ok(self.push(
            value,
            Op::Bce { probs, targets: targets.to_vec(), mask: mask.to_vec() },
            ng,
        ))
    }

    /// Weighted cross-entropy over class logits (NxC): the sum of
    /// `-w[y] log softmax(logits)[y]` over unmasked rows divided by the sum of
    /// the applied weights.
    pub fn wce(&mut self, logits: Var, targets: &[usize], weights: &[f64], mask: &[f64]) -> Result<Var, NnError> {
        let (rows, classes) = self.shape(logits);
        if weights.len() != classes {
            return Err(NnError::Shape(format!("wce: {} weights for {classes} classes", weights.len())));
        }
        if targets.len() != rows || mask.len() != rows {
            return Err(NnError::Shape("wce: targets/mask length".into()));
        }
        if let Some(&y) = targets.iter().find(|&&y| y >= classes) {
            return Err(NnError::Target(format!("class {y} of {classes}")));
        }
        let softmax = softmax_rows(self.value(logits));
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..rows {
            if mask[i] == 0.0 {
                continue;
            }
            let w = mask[i] * weights[targets[i]];
            let row = self.value(logits).row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            num += w * (lse - row[targets[i]]);
            den += w;
        }
        if den <= 0.0 {
            return Err(NnError::Target("every position is masked".into()));
        }
        let value = Matrix::from_elem((1, 1), num / den);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::Wce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                mask: mask.to_vec(),
                softmax,
            },
            ng,
        ))
    }

    /// Reverse-mode pass from a scalar root. A graph supports one backward
    /// pass; frozen parameters are absent from the result.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(NnError::NonScalarRoot(r, c));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones((1, 1)));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: Matrix, grads: &mut [Option<Matrix>], out: &mut Gradients) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => {
                out.map.insert(name.clone(), g.as_standard_layout().into_owned());
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, -&g);
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, &g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, &g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                self.acc(grads, *a, g);
            }
            Op::MulRow(a, row) => {
                if self.ng(*row) {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *row, gr);
                }
                if self.ng(*a) {
                    self.acc(grads, *a, &g * self.value(*row));
                }
            }
            Op::Affine(a, scale) => self.acc(grads, *a, g * *scale),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut ga = g;
                Zip::from(&mut ga).and(y).for_each(|g, &y| *g *= y * (1.0 - y));
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut ga = g;
                Zip::from(&mut ga).and(y).for_each(|g, &y| *g *= 1.0 - y * y);
                self.acc(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut ga = g;
                Zip::from(&mut ga).and(x).for_each(|g, &x| *g *= gelu_grad(x));
                self.acc(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = &g * y;
                for (mut row, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|r, &y| *r -= y * s);
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Matrix::zeros(self.shape(*a));
                let w = g.ncols();
                ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                self.acc(grads, *a, ga);
            }
            Op::GatherRows(a, indices) => {
                let mut ga = Matrix::zeros(self.shape(*a));
                for (i, &r) in indices.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(i);
                }
                self.acc(grads, *a, ga);
            }
            Op::InterleaveSteps { parts, steps } => {
                for (t, &p) in parts.iter().enumerate() {
                    if !self.ng(p) {
                        continue;
                    }
                    let (batch, cols) = self.shape(p);
                    let mut gp = Matrix::zeros((batch, cols));
                    for b in 0..batch {
                        gp.row_mut(b).assign(&g.row(b * steps + t));
                    }
                    self.acc(grads, p, gp);
                }
            }
            Op::Splice { input, window, batch } => {
                let d = self.shape(*input).1;
                let mut ga = Matrix::zeros(self.shape(*input));
                let width = 2 * window + 1;
                for (b, &len) in batch.lens.iter().enumerate() {
                    for t in 0..batch.max_len {
                        let out_row = batch.row(b, t);
                        for j in 0..width {
                            let Some(st) = (t + j).checked_sub(*window) else { continue };
                            if st >= len {
                                continue;
                            }
                            let mut dst = ga.row_mut(batch.row(b, st));
                            dst += &g.slice(s![out_row, j * d..(j + 1) * d]);
                        }
                    }
                }
                self.acc(grads, *input, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                if self.ng(*gamma) {
                    self.acc(grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = &g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut gx = Matrix::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / d;
                        let mean_dh_xh = dh.dot(&xh) / d;
                        let mut out_row = gx.row_mut(r);
                        Zip::from(&mut out_row)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &dh, &xh| *o = inv_std[r] * (dh - mean_dh - xh * mean_dh_xh));
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Attention { q, k, v, heads, batch, probs } => {
                let dim = self.shape(*q).1;
                let dk = dim / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let t = batch.max_len;
                let mut gq = Matrix::zeros(self.shape(*q));
                let mut gk = Matrix::zeros(self.shape(*k));
                let mut gv = Matrix::zeros(self.shape(*v));
                for b in 0..batch.batch() {
                    let r = b * t..(b + 1) * t;
                    for h in 0..*heads {
                        let c = h * dk..(h + 1) * dk;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![r.clone(), c.clone()]);
                        let qb = self.value(*q).slice(s![r.clone(), c.clone()]);
                        let kb = self.value(*k).slice(s![r.clone(), c.clone()]);
                        let vb = self.value(*v).slice(s![r.clone(), c.clone()]);
                        gv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vb.t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let sum = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|d, &p| *d -= p * sum);
                        }
                        ds *= scale;
                        gq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kb));
                        gk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qb));
                    }
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
            }
            Op::Sum(a) => {
                let ga = Matrix::from_elem(self.shape(*a), g[[0, 0]]);
                self.acc(grads, *a, ga);
            }
            Op::Bce { probs, targets, mask } => {
                let count: f64 = mask.iter().sum();
                let p = self.value(*probs);
                let scale = g[[0, 0]] / count;
                let mut gp = Matrix::zeros(p.dim());
                for i in 0..p.nrows() {
                    let pi = p[[i, 0]];
                    if mask[i] == 0.0 || pi <= BCE_EPS || pi >= 1.0 - BCE_EPS {
                        continue;
                    }
                    let y = targets[i];
                    gp[[i, 0]] = scale * mask[i] * (-y / pi + (1.0 - y) / (1.0 - pi));
                }
                self.acc(grads, *probs, gp);
            }
            Op::Wce { logits, targets, weights, mask, softmax } => {
                let den: f64 = targets
                    .iter()
                    .zip(mask)
                    .map(|(&y, &m)| m * weights[y])
                    .sum();
                let scale = g[[0, 0]] / den;
                let mut gl = softmax.clone();
                for (i, mut row) in gl.rows_mut().into_iter().enumerate() {
                    let w = mask[i] * weights[targets[i]];
                    row[targets[i]] -= 1.0;
                    row *= w * scale;
                }
                self.acc(grads, *logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_gradient_is_input() {
        let mut ps = ParamSet::new();
        ps.insert("w", array![[0.5, -1.0, 2.0]], true);
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let x = g.constant(array![[3.0, 4.0, 5.0]]);
        let wx = g.mul(w, x).unwrap();
        let loss = g.sum(wx);
        assert_eq!(g.scalar(loss), 1.5 - 4.0 + 10.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap(), &array![[3.0, 4.0, 5.0]]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut ps = ParamSet::new();
        ps.insert("a", array![[1.0, 2.0]], true);
        ps.insert("b", array![[3.0, 4.0]], false);
        let mut g = Graph::new();
        let a = g.param(&ps, "a").unwrap();
        let b = g.param(&ps, "b").unwrap();
        let ab = g.mul(a, b).unwrap();
        let loss = g.sum(ab);
        let grads = g.backward(loss).unwrap();
        assert!(grads.contains("a"));
        assert!(!grads.contains("b"));
    }

    #[test]
    fn backward_errors() {
        let mut ps = ParamSet::new();
        ps.insert("a", array![[1.0, 2.0]], true);
        let mut g = Graph::new();
        let a = g.param(&ps, "a").unwrap();
        assert!(matches!(g.backward(a), Err(NnError::NonScalarRoot(1, 2))));
        let loss = g.sum(a);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(NnError::GraphConsumed)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros((2, 3)));
        let b = g.constant(Matrix::zeros((2, 3)));
        assert!(matches!(g.matmul(a, b), Err(NnError::Shape(_))));
    }

    #[test]
    fn splice_zero_pads_each_sentence() {
        let mut g = Graph::new();
        // a, b, c in sentence 0; x in sentence 1 (padded to length 3)
        let x = g.constant(array![[1.0], [2.0], [3.0], [9.0], [0.0], [0.0]]);
        let batch = SeqBatch::new(vec![3, 1]);
        let y = g.splice(x, 1, &batch).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0).to_vec(), [0.0, 1.0, 2.0]);
        assert_eq!(v.row(1).to_vec(), [1.0, 2.0, 3.0]);
        assert_eq!(v.row(2).to_vec(), [2.0, 3.0, 0.0]);
        assert_eq!(v.row(3).to_vec(), [0.0, 9.0, 0.0]);
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new();
        let p = g.constant(array![[0.5]]);
        let l = g.bce(p, &[1.0], &[1.0]).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let p = g.constant(array![[1.0], [0.0], [0.3]]);
        let l = g.bce(p, &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]).unwrap();
        assert!(g.scalar(l) <= 1e-6);

        assert!(matches!(g.bce(p, &[1.0, 0.5, 0.0], &[1.0; 3]), Err(NnError::Target(_))));
        assert!(matches!(g.bce(p, &[1.0, 0.0, 0.0], &[0.0; 3]), Err(NnError::Target(_))));
    }

    #[test]
    fn wce_reference_values() {
        let mut g = Graph::new();
        let logits = g.constant(Matrix::zeros((1, 4)));
        let w = [1.0, 65.5, 276.0, 1.0];
        // single position: numerator 65.5 ln 4, normalized by the applied weight
        let l = g.wce(logits, &[1], &w, &[1.0]).unwrap();
        assert!((g.scalar(l) * 65.5 - 65.5 * 4f64.ln()).abs() < 1e-9);

        let logits = g.constant(array![[2.0, 0.0, -1.0, 0.5], [0.0, 1.0, 0.0, 0.0]]);
        let ce = g.wce(logits, &[0, 1], &[1.0; 4], &[1.0, 1.0]).unwrap();
        let lse = |r: [f64; 4]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let expected = ((lse([2.0, 0.0, -1.0, 0.5]) - 2.0) + (lse([0.0, 1.0, 0.0, 0.0]) - 1.0)) / 2.0;
        assert!((g.scalar(ce) - expected).abs() < 1e-12);

        let big = g.constant(array![[0.0, 60.0, 0.0, 0.0]]);
        let l = g.wce(big, &[1], &w, &[1.0]).unwrap();
        assert!(g.scalar(l) < 1e-20);

        assert!(matches!(g.wce(big, &[1], &[1.0; 3], &[1.0]), Err(NnError::Shape(_))));
    }
}
