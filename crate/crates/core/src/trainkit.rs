//! Training: class weights for the weighted cross-entropy, loss assembly,
//! Adam, the plateau learning-rate schedule, best-checkpoint selection and
//! masked-token pre-training of the transformer encoder.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStats, LabeledSentence};
use crate::evalkit::{sweep_threshold, EvalError};
use crate::models::{Arch, HeadVars, ModelError, PauseModel, PredictionOutput};
use crate::nncore::layers::{init_linear, init_transformer, linear, transformer_encode, TransformerConfig};
use crate::nncore::{Gradients, Graph, Matrix, NnError, ParamSet, SeqBatch, Var};
use crate::textnorm::{Token, Vocabulary};
use crate::PauseKind;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("category {category} of {task} never occurs in the training set")]
    MissingCategory { task: &'static str, category: usize },
    #[error("{0}")]
    Labels(String),
    #[error("loss became {value} at iteration {iteration}")]
    NonFinite { iteration: usize, value: f64 },
    #[error("no gradient state for parameter {0} shape {1:?}")]
    Optimizer(String, (usize, usize)),
    #[error("vocabulary does not fit the encoder: {0}")]
    Vocabulary(String),
    #[error("masking selected no tokens")]
    EmptyMask,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("validation: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub plateau_iters: usize,
    pub lr_decay: f64,
    pub max_iters: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub beta_rp: f64,
    pub beta_pip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr0: 5e-5,
            plateau_iters: 5000,
            lr_decay: 0.2,
            max_iters: 200_000,
            eval_every: 500,
            seed: 0,
            beta_rp: 0.5,
            beta_pip: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.eval_every == 0 || self.plateau_iters == 0 {
            return err("batch size, evaluation interval and plateau length must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return err(format!("initial learning rate {} must be positive", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return err(format!("learning-rate decay {} must lie in (0, 1)", self.lr_decay));
        }
        if !self.plateau_iters.is_multiple_of(self.eval_every) {
            return err(format!(
                "plateau length {} is not a multiple of the evaluation interval {}",
                self.plateau_iters, self.eval_every
            ));
        }
        if !(self.beta_rp > 0.0 && self.beta_pip > 0.0) {
            return err("F-beta weights must be positive".into());
        }
        Ok(())
    }
}

/// Per-class weights for the category losses, class 0 first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub rp: [f64; 4],
    pub pip: [f64; 4],
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights { rp: [1.0; 4], pip: [1.0; 4] }
    }
}

/// Weight of category k = (positions with category 0) / (positions with
/// category k), per task. RP category 3 is pinned to 1.0. A PIP category 3
/// that never occurs gets weight 1.0; categories 1 and 2 must occur.
pub fn compute_class_weights(stats: &CorpusStats) -> Result<ClassWeights, TrainError> {
    let task = |name: &'static str, counts: [usize; 3], total: usize| -> Result<[f64; 4], TrainError> {
        let zero = stats.tokens.saturating_sub(total) as f64;
        let mut w = [1.0; 4];
        for k in 1..=3 {
            match counts[k - 1] {
                0 if k < 3 => return Err(TrainError::MissingCategory { task: name, category: k }),
                0 => w[k] = 1.0,
                n => w[k] = zero / n as f64,
            }
        }
        Ok(w)
    };
    let mut rp = task("RP", stats.rp_counts, stats.rp_total)?;
    rp[3] = 1.0;
    let pip = task("PIP", stats.pip_counts, stats.pip_total)?;
    Ok(ClassWeights { rp, pip })
}

/// Row-aligned targets of a padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub p_rp: Vec<f64>,
    pub c_rp: Vec<usize>,
    pub p_pip: Vec<f64>,
    pub c_pip: Vec<usize>,
    pub mask: Vec<f64>,
}

pub fn batch_targets(sentences: &[&LabeledSentence], batch: &SeqBatch) -> Result<BatchTargets, TrainError> {
    if sentences.len() != batch.batch() {
        return Err(TrainError::Labels(format!("{} label rows for a batch of {}", sentences.len(), batch.batch())));
    }
    let rows = batch.rows();
    let mut t = BatchTargets {
        p_rp: vec![0.0; rows],
        c_rp: vec![0; rows],
        p_pip: vec![0.0; rows],
        c_pip: vec![0; rows],
        mask: batch.mask(),
    };
    for (b, s) in sentences.iter().enumerate() {
        let n = batch.lens[b];
        if [s.p_rp.len(), s.c_rp.len(), s.p_pip.len(), s.c_pip.len()].iter().any(|&l| l != n) {
            return Err(TrainError::Labels(format!("sentence {} has labels that do not match its {n} outputs", s.id)));
        }
        for i in 0..n {
            let r = batch.row(b, i);
            t.p_rp[r] = s.p_rp[i] as f64;
            t.c_rp[r] = s.c_rp[i] as usize;
            t.p_pip[r] = s.p_pip[i] as f64;
            t.c_pip[r] = s.c_pip[i] as usize;
        }
    }
    Ok(t)
}

/// Values of the individual loss terms; absent terms are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub rp_bce: f64,
    pub rp_wce: Option<f64>,
    pub pip_bce: Option<f64>,
    pub pip_wce: Option<f64>,
}

/// BCE on the RP probability; for CPI additionally WCE on both category
/// heads and BCE on the PIP probability, summed with equal weights.
/// Padding rows are masked out of every term.
pub fn total_loss(
    g: &mut Graph,
    heads: &HeadVars,
    targets: &BatchTargets,
    weights: &ClassWeights,
    arch: Arch,
) -> Result<(Var, LossTerms), TrainError> {
    let rows = g.shape(heads.rp_prob).0;
    if targets.mask.len() != rows {
        return Err(TrainError::Labels(format!("{} target rows for {rows} output rows", targets.mask.len())));
    }
    let rp_bce = g.bce(heads.rp_prob, &targets.p_rp, &targets.mask)?;
    let mut terms = LossTerms { rp_bce: g.scalar(rp_bce), ..Default::default() };
    if arch != Arch::Cpi {
        terms.total = terms.rp_bce;
        return Ok((rp_bce, terms));
    }
    let missing = || TrainError::Labels("CPI outputs lack a head".into());
    let rp_wce = g.wce(heads.rp_logits.ok_or_else(missing)?, &targets.c_rp, &weights.rp, &targets.mask)?;
    let pip_bce = g.bce(heads.pip_prob.ok_or_else(missing)?, &targets.p_pip, &targets.mask)?;
    let pip_wce = g.wce(heads.pip_logits.ok_or_else(missing)?, &targets.c_pip, &weights.pip, &targets.mask)?;
    terms.rp_wce = Some(g.scalar(rp_wce));
    terms.pip_bce = Some(g.scalar(pip_bce));
    terms.pip_wce = Some(g.scalar(pip_wce));
    let parts = g.concat_cols(&[rp_bce, rp_wce, pip_bce, pip_wce])?;
    let total = g.sum(parts);
    terms.total = g.scalar(total);
    Ok((total, terms))
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    params.check_gradients(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in &grads.map {
        let p = params.get_mut(name).ok_or_else(|| NnError::MissingParam(name.clone()))?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.dim()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.dim()));
        if m.dim() != g.dim() {
            return Err(TrainError::Optimizer(name.clone(), g.dim()));
        }
        ndarray::Zip::from(&mut p.value).and(&mut *m).and(&mut *v).and(g).for_each(|w, m, v, &g| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        });
    }
    Ok(())
}

/// Multiplies the learning rate by `decay` once `patience` iterations have
/// passed without a new best validation metric; the wait restarts after
/// every drop.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub last_change: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        PlateauScheduler { lr, decay, patience, best: None, last_change: 0 }
    }

    /// Records the metric measured at `iteration`; returns whether it is a
    /// new best.
    pub fn observe(&mut self, iteration: usize, metric: f64) -> bool {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.last_change = iteration;
        } else if iteration - self.last_change >= self.patience {
            self.lr *= self.decay;
            self.last_change = iteration;
        }
        improved
    }
}

/// Validation scores: RP at its best threshold, PIP likewise for CPI, and
/// their unweighted mean as the selection metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub metric: f64,
    pub rp_f: f64,
    pub rp_threshold: f64,
    pub pip_f: Option<f64>,
    pub pip_threshold: Option<f64>,
}

impl ValMetrics {
    /// A bare selection metric, for scripted validators.
    pub fn scalar(metric: f64) -> Self {
        ValMetrics { metric, rp_f: metric, rp_threshold: 0.5, pip_f: None, pip_threshold: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Learning rate in effect after this evaluation.
    pub lr: f64,
    /// Mean training losses since the previous record (`None` at iteration 0).
    pub train: Option<LossTerms>,
    pub val: ValMetrics,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the parameters of the best validation evaluation.
    pub best: PauseModel,
    pub best_iteration: usize,
    pub best_val: ValMetrics,
    pub log: Vec<LogRecord>,
    pub final_lr: f64,
}

/// A dataset converted to model inputs once, up front.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub sentences: Vec<&'a LabeledSentence>,
    pub ids: Vec<Vec<usize>>,
    pub speakers: Vec<Option<usize>>,
}

pub fn prepare<'a>(model: &PauseModel, vocab: &Vocabulary, data: &'a [LabeledSentence]) -> Result<Prepared<'a>, TrainError> {
    if vocab.len() != model.config.vocab_size {
        return Err(TrainError::Vocabulary(format!(
            "{} entries, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut p = Prepared { sentences: Vec::new(), ids: Vec::new(), speakers: Vec::new() };
    for s in data {
        if s.tokens.is_empty() {
            return Err(TrainError::Labels(format!("sentence {} has no tokens", s.id)));
        }
        p.ids.push(s.tokens.iter().map(|t| vocab.token_id(t)).collect());
        p.speakers.push(if model.config.uses_speakers() { Some(model.speaker_index(&s.speaker)?) } else { None });
        p.sentences.push(s);
    }
    Ok(p)
}

impl Prepared<'_> {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    fn input(&self, model: &PauseModel, idx: &[usize]) -> Result<crate::models::ModelInput, TrainError> {
        let ids: Vec<Vec<usize>> = idx.iter().map(|&i| self.ids[i].clone()).collect();
        let speakers = idx.iter().map(|&i| self.speakers[i]).collect();
        Ok(model.input_from_ids(&ids, speakers)?)
    }
}

/// Predictions for every sentence, computed in chunks of `batch_size`.
pub fn predict_all(model: &PauseModel, data: &Prepared, batch_size: usize) -> Result<Vec<PredictionOutput>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend(model.predict(&data.input(model, chunk)?)?);
    }
    Ok(out)
}

/// Best-threshold F-scores of a model on a prepared validation set.
pub fn validation_metrics(model: &PauseModel, data: &Prepared, cfg: &TrainConfig) -> Result<ValMetrics, TrainError> {
    let outputs = predict_all(model, data, cfg.batch_size)?;
    let mut tokens: Vec<Token> = Vec::new();
    let (mut rp_p, mut rp_y, mut pip_p, mut pip_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (s, o) in data.sentences.iter().zip(&outputs) {
        tokens.extend(s.tokens.iter().cloned());
        rp_p.extend_from_slice(&o.rp_prob);
        rp_y.extend_from_slice(&s.p_rp);
        if let Some(p) = &o.pip_prob {
            pip_p.extend_from_slice(p);
            pip_y.extend_from_slice(&s.p_pip);
        }
    }
    let rp = sweep_threshold(&rp_p, &rp_y, &tokens, cfg.beta_rp, PauseKind::Rp)?;
    if model.config.arch != Arch::Cpi {
        return Ok(ValMetrics { metric: rp.best.f, rp_f: rp.best.f, rp_threshold: rp.best.threshold, pip_f: None, pip_threshold: None });
    }
    let pip = sweep_threshold(&pip_p, &pip_y, &tokens, cfg.beta_pip, PauseKind::Pip)?;
    Ok(ValMetrics {
        metric: 0.5 * (rp.best.f + pip.best.f),
        rp_f: rp.best.f,
        rp_threshold: rp.best.threshold,
        pip_f: Some(pip.best.f),
        pip_threshold: Some(pip.best.threshold),
    })
}

/// Runs one optimization step on the given sentences; returns the loss
/// terms before the update.
pub fn train_step(
    model: &mut PauseModel,
    data: &Prepared,
    idx: &[usize],
    weights: &ClassWeights,
    adam: &mut AdamState,
    lr: f64,
) -> Result<LossTerms, TrainError> {
    let input = data.input(model, idx)?;
    let sentences: Vec<&LabeledSentence> = idx.iter().map(|&i| data.sentences[i]).collect();
    let targets = batch_targets(&sentences, &input.batch)?;
    let mut g = Graph::new();
    let heads = model.forward(&mut g, &input)?;
    let (loss, terms) = total_loss(&mut g, &heads, &targets, weights, model.config.arch)?;
    if !terms.total.is_finite() {
        return Err(TrainError::NonFinite { iteration: adam.step as usize, value: terms.total });
    }
    let grads = g.backward(loss)?;
    adam_step(&mut model.params, &grads, adam, lr)?;
    Ok(terms)
}

/// Shuffled sentence order, reshuffled after every pass.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler { order: (0..n).collect(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        batch
    }
}

/// Trains with the plateau schedule and keeps the parameters of the best
/// validation evaluation. Validation runs at iteration 0 and every
/// `eval_every` iterations through `validator`.
pub fn train_with<V>(
    mut model: PauseModel,
    train: &Prepared,
    cfg: &TrainConfig,
    weights: &ClassWeights,
    mut validator: V,
) -> Result<TrainOutcome, TrainError>
where
    V: FnMut(&PauseModel) -> Result<ValMetrics, TrainError>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Labels("training set is empty".into()));
    }
    let mut sampler = Sampler::new(train.len(), cfg.seed);
    let mut adam = AdamState::new();
    let mut sched = PlateauScheduler::new(cfg.lr0, cfg.lr_decay, cfg.plateau_iters);
    let mut log = Vec::new();

    let val = validator(&model)?;
    sched.observe(0, val.metric);
    log.push(LogRecord { iteration: 0, lr: sched.lr, train: None, val, best: true });
    let mut best = (model.params.clone(), 0, val);

    let mut acc = LossTerms::default();
    let mut acc_n = 0usize;
    for it in 1..=cfg.max_iters {
        let idx = sampler.next_batch(cfg.batch_size);
        let terms = train_step(&mut model, train, &idx, weights, &mut adam, sched.lr).map_err(|e| match e {
            TrainError::NonFinite { value, .. } => TrainError::NonFinite { iteration: it, value },
            other => other,
        })?;
        accumulate(&mut acc, &terms);
        acc_n += 1;
        if it % cfg.eval_every == 0 || it == cfg.max_iters {
            let val = validator(&model)?;
            let improved = sched.observe(it, val.metric);
            if improved {
                best = (model.params.clone(), it, val);
            }
            log.push(LogRecord { iteration: it, lr: sched.lr, train: Some(mean(&acc, acc_n)), val, best: improved });
            acc = LossTerms::default();
            acc_n = 0;
        }
    }
    let best_model = PauseModel { config: model.config.clone(), params: best.0 };
    Ok(TrainOutcome { best: best_model, best_iteration: best.1, best_val: best.2, log, final_lr: sched.lr })
}

/// [`train_with`] using best-threshold F-scores on `val` for validation.
pub fn train(
    model: PauseModel,
    vocab: &Vocabulary,
    train_set: &[LabeledSentence],
    val_set: &[LabeledSentence],
    cfg: &TrainConfig,
    weights: &ClassWeights,
) -> Result<TrainOutcome, TrainError> {
    if val_set.is_empty() {
        return Err(TrainError::Labels("validation set is empty".into()));
    }
    let tr = prepare(&model, vocab, train_set)?;
    let va = prepare(&model, vocab, val_set)?;
    train_with(model, &tr, cfg, weights, |m| validation_metrics(m, &va, cfg))
}

fn accumulate(acc: &mut LossTerms, t: &LossTerms) {
    let add = |a: &mut Option<f64>, b: Option<f64>| {
        if let Some(b) = b {
            *a = Some(a.unwrap_or(0.0) + b);
        }
    };
    acc.total += t.total;
    acc.rp_bce += t.rp_bce;
    add(&mut acc.rp_wce, t.rp_wce);
    add(&mut acc.pip_bce, t.pip_bce);
    add(&mut acc.pip_wce, t.pip_wce);
}

fn mean(acc: &LossTerms, n: usize) -> LossTerms {
    let n = n.max(1) as f64;
    LossTerms {
        total: acc.total / n,
        rp_bce: acc.rp_bce / n,
        rp_wce: acc.rp_wce.map(|v| v / n),
        pip_bce: acc.pip_bce.map(|v| v / n),
        pip_wce: acc.pip_wce.map(|v| v / n),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub mask_rate: f64,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig { mask_rate: 0.15, iters: 2000, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct MlmOutcome {
    /// Encoder parameters under the `enc.` prefix.
    pub encoder: ParamSet,
    /// Encoder plus the `mlm.out` prediction layer, for [`masked_accuracy`].
    pub full: ParamSet,
    /// Mean masked-token loss per logged window of 100 iterations.
    pub losses: Vec<f64>,
}

/// Replaces about `mask_rate` of the tokens with the mask id; returns the
/// corrupted ids and the masked positions.
fn mask_tokens(ids: &[usize], rate: f64, mask_id: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<bool>) {
    let mut out = ids.to_vec();
    let mut masked = vec![false; ids.len()];
    for i in 0..ids.len() {
        if rng.random::<f64>() < rate {
            out[i] = mask_id;
            masked[i] = true;
        }
    }
    (out, masked)
}

fn mlm_loss(
    g: &mut Graph,
    ps: &ParamSet,
    tcfg: &TransformerConfig,
    sentences: &[Vec<usize>],
    corrupted: &[Vec<usize>],
    masked: &[Vec<bool>],
) -> Result<(Var, Var, Vec<usize>, Vec<f64>), TrainError> {
    let batch = SeqBatch::new(sentences.iter().map(Vec::len).collect());
    let mut ids = vec![0; batch.rows()];
    let mut targets = vec![0; batch.rows()];
    let mut mask = vec![0.0; batch.rows()];
    for b in 0..sentences.len() {
        for t in 0..batch.lens[b] {
            let r = batch.row(b, t);
            ids[r] = corrupted[b][t];
            targets[r] = sentences[b][t];
            mask[r] = if masked[b][t] { 1.0 } else { 0.0 };
        }
    }
    if mask.iter().all(|&m| m == 0.0) {
        return Err(TrainError::EmptyMask);
    }
    let h = transformer_encode(g, ps, "enc", tcfg, &ids, &batch)?;
    let logits = linear(g, ps, "mlm.out", h)?;
    let loss = g.wce(logits, &targets, &vec![1.0; tcfg.vocab_size], &mask)?;
    Ok((loss, logits, targets, mask))
}

fn check_mlm(vocab: &Vocabulary, tcfg: &TransformerConfig, cfg: &MlmConfig) -> Result<usize, TrainError> {
    if vocab.len() != tcfg.vocab_size {
        return Err(TrainError::Vocabulary(format!("{} entries, encoder expects {}", vocab.len(), tcfg.vocab_size)));
    }
    let mask_id = vocab
        .id(MASK_TOKEN)
        .ok_or_else(|| TrainError::Vocabulary(format!("{MASK_TOKEN} entry missing")))?;
    if !(cfg.mask_rate > 0.0 && cfg.mask_rate <= 1.0) {
        return Err(TrainError::EmptyMask);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(TrainError::Config("batch size and learning rate must be positive".into()));
    }
    Ok(mask_id)
}

/// Masked-token pre-training of a transformer encoder on tokenized
/// sentences. Masked positions are replaced by `[MASK]` and predicted
/// through a linear output layer that is discarded afterwards.
pub fn mlm_pretrain(
    sentences: &[Vec<Token>],
    vocab: &Vocabulary,
    tcfg: &TransformerConfig,
    cfg: &MlmConfig,
) -> Result<MlmOutcome, TrainError> {
    let mask_id = check_mlm(vocab, tcfg, cfg)?;
    let data: Vec<Vec<usize>> = sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.iter().map(|t| vocab.token_id(t)).collect())
        .collect();
    if data.is_empty() {
        return Err(TrainError::Labels("no sentences to pre-train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::new();
    init_transformer(&mut ps, "enc", tcfg, &mut rng)?;
    init_linear(&mut ps, "mlm.out", tcfg.model_dim, tcfg.vocab_size, &mut rng);
    let mut adam = AdamState::new();
    let mut sampler = Sampler::new(data.len(), cfg.seed.wrapping_add(1));
    let mut losses = Vec::new();
    let mut window = (0.0, 0usize);
    for it in 1..=cfg.iters {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<Vec<usize>> = idx.iter().map(|&i| data[i].clone()).collect();
        let (corrupted, masked) = loop {
            let (c, m): (Vec<_>, Vec<_>) = batch.iter().map(|s| mask_tokens(s, cfg.mask_rate, mask_id, &mut rng)).unzip();
            if m.iter().flatten().any(|&x| x) {
                break (c, m);
            }
        };
        let mut g = Graph::new();
        let (loss, ..) = mlm_loss(&mut g, &ps, tcfg, &batch, &corrupted, &masked)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(TrainError::NonFinite { iteration: it, value });
        }
        let grads = g.backward(loss)?;
        adam_step(&mut ps, &grads, &mut adam, cfg.lr)?;
        window.0 += value;
        window.1 += 1;
        if it % 100 == 0 || it == cfg.iters {
            losses.push(window.0 / window.1 as f64);
            window = (0.0, 0);
        }
    }
    Ok(MlmOutcome { encoder: ps.subset("enc."), full: ps, losses })
}

/// Fraction of masked tokens recovered by an encoder plus output layer, on
/// one fixed random masking of `sentences`. Needs the `mlm.out` layer, so
/// it takes the full pre-training parameter set.
pub fn masked_accuracy(
    ps: &ParamSet,
    sentences: &[Vec<Token>],
    vocab: &Vocabulary,
    tcfg: &TransformerConfig,
    cfg: &MlmConfig,
) -> Result<f64, TrainError> {
    let mask_id = check_mlm(vocab, tcfg, cfg)?;
    let data: Vec<Vec<usize>> = sentences.iter().map(|s| s.iter().map(|t| vocab.token_id(t)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (corrupted, masked): (Vec<_>, Vec<_>) = data.iter().map(|s| mask_tokens(s, cfg.mask_rate, mask_id, &mut rng)).unzip();
    let mut g = Graph::new();
    let (_, logits, targets, mask) = mlm_loss(&mut g, ps, tcfg, &data, &corrupted, &masked)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (r, row) in g.value(logits).rows().into_iter().enumerate() {
        if mask[r] == 0.0 {
            continue;
        }
        let pred = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
        hit += (pred == targets[r]) as usize;
        total += 1;
    }
    Ok(hit as f64 / total as f64)
}
