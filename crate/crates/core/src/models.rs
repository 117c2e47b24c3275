//! The four pause models and the CPI decision rule.
//!
//! * `Baseline`: static embeddings, BiLSTMP layers each followed by a
//!   splicing window, sigmoid output.
//! * `BaselineSpk`: the baseline with a speaker embedding, resized by a
//!   learned linear map, added after the first splicing window.
//! * `Rpi`: encoder, speaker embedding added to every position, two BiLSTM
//!   decoder layers, sigmoid output.
//! * `Cpi`: the RPI encoder feeding two independent decoder branches (RP and
//!   PIP), each with a probability head and a 4-way category head.
//!
//! Parameter names are grouped by prefix: `enc.` (encoder), `spk.`
//! (speaker table and resize), `base.` (baseline layers), `rp.` and `pip.`
//! (decoder branches and heads).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PauseKind;
use crate::nncore::layers::{
    bilstm_forward, embed, init_bilstm, init_linear, init_transformer, linear, sigmoid_head, LstmConfig, Positional,
    TransformerConfig,
};
use crate::nncore::{Graph, NnError, ParamSet, SeqBatch, Var};
use crate::textnorm::{Token, Vocabulary};

pub const MODEL_FORMAT: &str = "pausekit-model";
pub const MODEL_VERSION: u32 = 1;
/// Category classes per head, including the "no pause" class 0.
pub const CATEGORY_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),
    #[error("model is speaker-conditioned but sentence {0} has no speaker")]
    MissingSpeaker(usize),
    #[error("empty sentence at batch position {0}")]
    EmptySentence(usize),
    #[error("{what}: expected {expected} entries, got {found}")]
    Length { what: &'static str, expected: usize, found: usize },
    #[error("checkpoint does not match the model configuration: {0}")]
    Mismatch(String),
    #[error("model config {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Baseline,
    BaselineSpk,
    Rpi,
    Cpi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    /// Embedding table lookup; `dim` is the subword embedding size.
    StaticEmbedding { dim: usize },
    Transformer {
        layers: usize,
        heads: usize,
        model_dim: usize,
        ff_dim: usize,
        positional: Positional,
    },
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        match *self {
            EncoderConfig::StaticEmbedding { dim } => dim,
            EncoderConfig::Transformer { model_dim, .. } => model_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub encoder: EncoderConfig,
    pub encoder_trainable: bool,
    pub vocab_size: usize,
    /// Known speakers; row `i` of the speaker table belongs to `speakers[i]`.
    pub speakers: Vec<String>,
    /// RPI/CPI only: add the speaker embedding to the encoder output.
    /// Switching it off gives the unconditioned encoder-decoder model.
    pub speaker_injection: bool,
    pub bilstmp_hidden: usize,
    pub bilstmp_projection: usize,
    /// Number of BiLSTMP + splice blocks in the baseline.
    pub baseline_layers: usize,
    /// Per direction.
    pub decoder_bilstm_hidden: usize,
    pub decoder_layers: usize,
    /// Encoder output and speaker embedding size.
    pub hidden_dim: usize,
    /// Total splicing window width (odd).
    pub splice_w: usize,
}

impl ModelConfig {
    /// Full-size dimensions: 300-dim static embeddings for the baseline,
    /// 512/128 BiLSTMP, 512-per-direction decoders, 768-dim hidden sequence.
    pub fn full_size(arch: Arch, vocab_size: usize, speakers: Vec<String>) -> Self {
        let encoder = match arch {
            Arch::Baseline | Arch::BaselineSpk => EncoderConfig::StaticEmbedding { dim: 300 },
            Arch::Rpi | Arch::Cpi => EncoderConfig::Transformer {
                layers: 12,
                heads: 12,
                model_dim: 768,
                ff_dim: 3072,
                positional: Positional::Sinusoidal,
            },
        };
        ModelConfig {
            arch,
            encoder,
            encoder_trainable: true,
            vocab_size,
            speakers,
            speaker_injection: true,
            bilstmp_hidden: 512,
            bilstmp_projection: 128,
            baseline_layers: 2,
            decoder_bilstm_hidden: 512,
            decoder_layers: 2,
            hidden_dim: 768,
            splice_w: 7,
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self.arch, Arch::Baseline | Arch::BaselineSpk)
    }

    pub fn uses_speakers(&self) -> bool {
        match self.arch {
            Arch::Baseline => false,
            Arch::BaselineSpk => true,
            Arch::Rpi | Arch::Cpi => self.speaker_injection,
        }
    }

    pub fn has_categories(&self) -> bool {
        self.arch == Arch::Cpi
    }

    /// Encoder settings when the encoder is a transformer.
    pub fn transformer(&self) -> Option<TransformerConfig> {
        match self.encoder {
            EncoderConfig::Transformer { layers, heads, model_dim, ff_dim, positional } => Some(TransformerConfig {
                vocab_size: self.vocab_size,
                layers,
                heads,
                model_dim,
                ff_dim,
                positional,
            }),
            EncoderConfig::StaticEmbedding { .. } => None,
        }
    }

    fn baseline_lstm(&self, layer: usize) -> LstmConfig {
        let input = if layer == 0 { self.encoder.output_dim() } else { self.spliced_dim() };
        LstmConfig::projected(input, self.bilstmp_hidden, self.bilstmp_projection)
    }

    fn spliced_dim(&self) -> usize {
        2 * self.bilstmp_projection * self.splice_w
    }

    fn decoder_lstm(&self, layer: usize) -> LstmConfig {
        let input = if layer == 0 { self.hidden_dim } else { 2 * self.decoder_bilstm_hidden };
        LstmConfig::plain(input, self.decoder_bilstm_hidden)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size == 0 || self.encoder.output_dim() == 0 || self.hidden_dim == 0 {
            return err("vocabulary, encoder and hidden sizes must be positive");
        }
        if let Some(t) = self.transformer() {
            t.validate()?;
        }
        if self.is_baseline() {
            if self.bilstmp_hidden == 0 || self.bilstmp_projection == 0 || self.baseline_layers == 0 {
                return err("baseline BiLSTMP sizes must be positive");
            }
            if self.splice_w.is_multiple_of(2) {
                return err("splicing window width must be odd");
            }
        } else {
            if self.decoder_bilstm_hidden == 0 || self.decoder_layers == 0 {
                return err("decoder sizes must be positive");
            }
            if self.encoder.output_dim() != self.hidden_dim {
                return Err(ModelError::Config(format!(
                    "encoder output dim {} differs from speaker embedding dim {}",
                    self.encoder.output_dim(),
                    self.hidden_dim
                )));
            }
        }
        if self.uses_speakers() && self.speakers.is_empty() {
            return err("speaker-conditioned model needs at least one speaker");
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.speakers.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(ModelError::Config(format!("speaker {dup:?} listed twice")));
        }
        Ok(())
    }
}

/// Token ids of a padded batch plus the speaker row of every sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub batch: SeqBatch,
    pub speakers: Vec<Option<usize>>,
}

/// Graph nodes produced by one forward pass; every node has one row per
/// batch row (padding included).
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub rp_prob: Var,
    pub rp_logits: Option<Var>,
    pub rp_cat: Option<Var>,
    pub pip_prob: Option<Var>,
    pub pip_logits: Option<Var>,
    pub pip_cat: Option<Var>,
}

/// Per-token model outputs for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub rp_prob: Vec<f64>,
    pub rp_cat: Option<Vec<[f64; CATEGORY_CLASSES]>>,
    pub pip_prob: Option<Vec<f64>>,
    pub pip_cat: Option<Vec<[f64; CATEGORY_CLASSES]>>,
}

impl PredictionOutput {
    pub fn len(&self) -> usize {
        self.rp_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rp_prob.is_empty()
    }
}

/// A model configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PauseModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl PauseModel {
    /// Randomly initialized model; the encoder is frozen when the config
    /// says so.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = &config;
        match c.transformer() {
            Some(t) => init_transformer(&mut ps, "enc", &t, &mut rng)?,
            None => {
                let d = c.encoder.output_dim();
                ps.init_normal("enc.emb", c.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut rng);
            }
        }
        if c.uses_speakers() {
            ps.init_normal("spk.table", c.n_speakers(), c.hidden_dim, 0.1, &mut rng);
        }
        if c.is_baseline() {
            for l in 0..c.baseline_layers {
                init_bilstm(&mut ps, &format!("base.l{l}"), &c.baseline_lstm(l), &mut rng);
            }
            if c.arch == Arch::BaselineSpk {
                ps.init_glorot("spk.proj.weight", c.hidden_dim, c.spliced_dim(), &mut rng);
            }
            init_linear(&mut ps, "rp.prob", c.spliced_dim(), 1, &mut rng);
        } else {
            let branches: &[&str] = if c.arch == Arch::Cpi { &["rp", "pip"] } else { &["rp"] };
            let out = 2 * c.decoder_bilstm_hidden;
            for br in branches {
                for l in 0..c.decoder_layers {
                    init_bilstm(&mut ps, &format!("{br}.dec{l}"), &c.decoder_lstm(l), &mut rng);
                }
                init_linear(&mut ps, &format!("{br}.prob"), out, 1, &mut rng);
                if c.arch == Arch::Cpi {
                    init_linear(&mut ps, &format!("{br}.cat"), out, CATEGORY_CLASSES, &mut rng);
                }
            }
        }
        ps.set_trainable_prefix("enc.", config.encoder_trainable);
        Ok(PauseModel { config, params: ps })
    }

    /// Pairs a configuration with loaded parameters, checking that names
    /// and shapes agree exactly. Trainable flags follow the configuration.
    pub fn from_parts(config: ModelConfig, mut params: ParamSet) -> Result<Self, ModelError> {
        let template = PauseModel::new(config, 0)?;
        for (name, p) in template.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| ModelError::Mismatch(format!("missing parameter {name}")))?;
            if got.value.dim() != p.value.dim() {
                return Err(ModelError::Mismatch(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.value.dim(),
                    p.value.dim()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !template.params.contains(n)) {
            return Err(ModelError::Mismatch(format!("unexpected parameter {extra}")));
        }
        for (name, p) in template.params.iter() {
            params.get_mut(name).expect("checked above").trainable = p.trainable;
        }
        Ok(PauseModel { config: template.config, params })
    }

    /// Copies pre-trained encoder weights (names under `enc.`) into the
    /// model, keeping the model's trainable flags.
    pub fn load_encoder(&mut self, encoder: &ParamSet) -> Result<(), ModelError> {
        let expected = self.params.names().filter(|n| n.starts_with("enc.")).count();
        let loaded = self.params.load_prefix(encoder, "enc.")?;
        if loaded != expected {
            return Err(ModelError::Mismatch(format!("encoder has {loaded} of {expected} parameters")));
        }
        Ok(())
    }

    pub fn speaker_index(&self, speaker: &str) -> Result<usize, ModelError> {
        self.config
            .speakers
            .iter()
            .position(|s| s == speaker)
            .ok_or_else(|| ModelError::UnknownSpeaker(speaker.to_string()))
    }

    /// Pads a batch of tokenized sentences. Speakers are resolved only when
    /// the model uses them; an unknown speaker is an error.
    pub fn input(&self, vocab: &Vocabulary, sentences: &[(&[Token], Option<&str>)]) -> Result<ModelInput, ModelError> {
        if vocab.len() != self.config.vocab_size {
            return Err(ModelError::Mismatch(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let ids: Vec<Vec<usize>> = sentences
            .iter()
            .map(|(tokens, _)| tokens.iter().map(|t| vocab.token_id(t)).collect())
            .collect();
        let speakers = sentences
            .iter()
            .map(|(_, spk)| match spk {
                Some(s) if self.config.uses_speakers() => self.speaker_index(s).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.input_from_ids(&ids, speakers)
    }

    pub fn input_from_ids(&self, ids: &[Vec<usize>], speakers: Vec<Option<usize>>) -> Result<ModelInput, ModelError> {
        if ids.len() != speakers.len() {
            return Err(ModelError::Length { what: "speakers", expected: ids.len(), found: speakers.len() });
        }
        if let Some(i) = ids.iter().position(|s| s.is_empty()) {
            return Err(ModelError::EmptySentence(i));
        }
        if let Some(&bad) = ids.iter().flatten().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::Mismatch(format!("token id {bad} outside vocabulary")));
        }
        if let Some(&Some(bad)) = speakers.iter().find(|s| s.is_some_and(|i| i >= self.config.n_speakers())) {
            return Err(ModelError::UnknownSpeaker(format!("#{bad}")));
        }
        let batch = SeqBatch::new(ids.iter().map(Vec::len).collect());
        let mut flat = vec![0; batch.rows()];
        for (b, sent) in ids.iter().enumerate() {
            for (t, &id) in sent.iter().enumerate() {
                flat[batch.row(b, t)] = id;
            }
        }
        Ok(ModelInput { ids: flat, batch, speakers })
    }

    fn encode(&self, g: &mut Graph, input: &ModelInput) -> Result<Var, ModelError> {
        Ok(match self.config.transformer() {
            Some(t) => crate::nncore::layers::transformer_encode(g, &self.params, "enc", &t, &input.ids, &input.batch)?,
            None => embed(g, &self.params, "enc.emb", &input.ids)?,
        })
    }

    /// Speaker table rows, one per batch row, or `None` when no sentence of
    /// the batch carries a speaker.
    fn speaker_rows(&self, input: &ModelInput) -> Result<Option<Vec<usize>>, ModelError> {
        if !self.config.uses_speakers() {
            return Ok(None);
        }
        let optional = self.config.arch == Arch::BaselineSpk;
        if optional && input.speakers.iter().all(Option::is_none) {
            return Ok(None);
        }
        if let Some(i) = input.speakers.iter().position(Option::is_none) {
            return Err(ModelError::MissingSpeaker(i));
        }
        let rows = (0..input.batch.rows())
            .map(|r| input.speakers[r / input.batch.max_len].expect("checked above"))
            .collect();
        Ok(Some(rows))
    }

    /// Records the forward pass on `g`.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<HeadVars, ModelError> {
        if input.batch.lens.contains(&0) || input.batch.batch() == 0 {
            return Err(ModelError::EmptySentence(input.batch.lens.iter().position(|&l| l == 0).unwrap_or(0)));
        }
        let spk_rows = self.speaker_rows(input)?;
        let hidden = self.encode(g, input)?;
        let ps = &self.params;
        let c = &self.config;
        if c.is_baseline() {
            let half = c.splice_w / 2;
            let mut x = hidden;
            for l in 0..c.baseline_layers {
                x = bilstm_forward(g, ps, &format!("base.l{l}"), &c.baseline_lstm(l), x, &input.batch)?;
                x = g.splice(x, half, &input.batch)?;
                if l == 0 {
                    if let Some(rows) = &spk_rows {
                        let table = g.param(ps, "spk.table")?;
                        let spk = g.gather_rows(table, rows)?;
                        let w = g.param(ps, "spk.proj.weight")?;
                        let resized = g.matmul(spk, w)?;
                        x = g.add(x, resized)?;
                    }
                }
            }
            let rp_prob = sigmoid_head(g, ps, "rp.prob", x)?;
            return Ok(HeadVars { rp_prob, rp_logits: None, rp_cat: None, pip_prob: None, pip_logits: None, pip_cat: None });
        }

        let mut h = hidden;
        if let Some(rows) = &spk_rows {
            let table = g.param(ps, "spk.table")?;
            let spk = g.gather_rows(table, rows)?;
            h = g.add(h, spk)?;
        }
        let rp = self.branch(g, "rp", h, &input.batch)?;
        if c.arch == Arch::Rpi {
            return Ok(HeadVars { rp_prob: rp.0, rp_logits: None, rp_cat: None, pip_prob: None, pip_logits: None, pip_cat: None });
        }
        let pip = self.branch(g, "pip", h, &input.batch)?;
        Ok(HeadVars {
            rp_prob: rp.0,
            rp_logits: rp.1,
            rp_cat: rp.2,
            pip_prob: Some(pip.0),
            pip_logits: pip.1,
            pip_cat: pip.2,
        })
    }

    /// Decoder stack and heads of one branch: (probability, logits, softmax).
    fn branch(&self, g: &mut Graph, name: &str, h: Var, batch: &SeqBatch) -> Result<(Var, Option<Var>, Option<Var>), ModelError> {
        let ps = &self.params;
        let mut x = h;
        for l in 0..self.config.decoder_layers {
            x = bilstm_forward(g, ps, &format!("{name}.dec{l}"), &self.config.decoder_lstm(l), x, batch)?;
        }
        let prob = sigmoid_head(g, ps, &format!("{name}.prob"), x)?;
        if !self.config.has_categories() {
            return Ok((prob, None, None));
        }
        let logits = linear(g, ps, &format!("{name}.cat"), x)?;
        let cat = g.softmax_rows(logits);
        Ok((prob, Some(logits), Some(cat)))
    }

    /// Forward pass without gradients, split into one output per sentence.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<PredictionOutput>, ModelError> {
        let mut g = Graph::new();
        let heads = self.forward(&mut g, input)?;
        let batch = &input.batch;
        let column = |v: Var, b: usize| -> Vec<f64> {
            (0..batch.lens[b]).map(|t| g.value(v)[[batch.row(b, t), 0]]).collect()
        };
        let dists = |v: Var, b: usize| -> Vec<[f64; CATEGORY_CLASSES]> {
            (0..batch.lens[b])
                .map(|t| {
                    let row = g.value(v).row(batch.row(b, t));
                    std::array::from_fn(|k| row[k])
                })
                .collect()
        };
        Ok((0..batch.batch())
            .map(|b| PredictionOutput {
                rp_prob: column(heads.rp_prob, b),
                rp_cat: heads.rp_cat.map(|v| dists(v, b)),
                pip_prob: heads.pip_prob.map(|v| column(v, b)),
                pip_cat: heads.pip_cat.map(|v| dists(v, b)),
            })
            .collect())
    }

    /// Convenience wrapper for a single tokenized sentence.
    pub fn predict_tokens(&self, vocab: &Vocabulary, tokens: &[Token], speaker: Option<&str>) -> Result<PredictionOutput, ModelError> {
        let input = self.input(vocab, &[(tokens, speaker)])?;
        Ok(self.predict(&input)?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionThresholds {
    pub rp: f64,
    pub pip: f64,
}

impl Default for DecisionThresholds {
    fn default() -> Self {
        DecisionThresholds { rp: 0.5, pip: 0.5 }
    }
}

/// A predicted pause after a token. `category` is `None` for models
/// without category heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub kind: PauseKind,
    pub category: Option<u8>,
}

/// Most probable category among 1..=3; class 0 is ignored and ties go to
/// the smaller index.
pub fn category_argmax(dist: &[f64; CATEGORY_CLASSES]) -> u8 {
    let mut best = 1;
    for k in 2..CATEGORY_CLASSES {
        if dist[k] > dist[best] {
            best = k;
        }
    }
    best as u8
}

/// Probability gate followed by the category argmax. RP decisions are made
/// only on word-final non-punctuation tokens, PIP decisions only on
/// punctuation tokens.
pub fn decide(output: &PredictionOutput, tokens: &[Token], thresholds: DecisionThresholds) -> Result<Vec<Option<Decision>>, ModelError> {
    let n = tokens.len();
    let check = |what: &'static str, found: usize| {
        if found == n {
            Ok(())
        } else {
            Err(ModelError::Length { what, expected: n, found })
        }
    };
    check("rp_prob", output.rp_prob.len())?;
    for (what, len) in [
        ("rp_cat", output.rp_cat.as_ref().map(Vec::len)),
        ("pip_prob", output.pip_prob.as_ref().map(Vec::len)),
        ("pip_cat", output.pip_cat.as_ref().map(Vec::len)),
    ] {
        if let Some(len) = len {
            check(what, len)?;
        }
    }
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            if tok.rp_eligible() && output.rp_prob[i] >= thresholds.rp {
                let category = output.rp_cat.as_ref().map(|c| category_argmax(&c[i]));
                return Some(Decision { kind: PauseKind::Rp, category });
            }
            if tok.pip_eligible() {
                if let Some(p) = &output.pip_prob {
                    if p[i] >= thresholds.pip {
                        let category = output.pip_cat.as_ref().map(|c| category_argmax(&c[i]));
                        return Some(Decision { kind: PauseKind::Pip, category });
                    }
                }
            }
            None
        })
        .collect())
}

/// JSON sidecar stored next to a checkpoint: everything needed to rebuild
/// the model and run it on raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Vocabulary file the model was trained with.
    pub vocab: PathBuf,
    /// Duration category thresholds (ms) used to build the training labels.
    pub category_thresholds: Vec<u32>,
    /// Thresholds selected on the validation set.
    pub decision: DecisionThresholds,
    /// Free-form provenance, e.g. training metrics.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl ModelSidecar {
    pub fn new(model: ModelConfig, vocab: impl Into<PathBuf>, category_thresholds: Vec<u32>) -> Self {
        ModelSidecar {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            model,
            vocab: vocab.into(),
            category_thresholds,
            decision: DecisionThresholds::default(),
            notes: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(path, text + "\n")
            .map_err(|e| ModelError::Sidecar { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let fail = |reason: String| ModelError::Sidecar { path: path.to_path_buf(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let sidecar: ModelSidecar = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        if sidecar.format != MODEL_FORMAT || sidecar.version != MODEL_VERSION {
            return Err(fail(format!(
                "unsupported format {} version {}",
                sidecar.format, sidecar.version
            )));
        }
        sidecar.model.validate()?;
        Ok(sidecar)
    }

    /// Vocabulary path resolved against the sidecar's directory when
    /// relative.
    pub fn vocab_path(&self, sidecar_path: impl AsRef<Path>) -> PathBuf {
        if self.vocab.is_absolute() {
            return self.vocab.clone();
        }
        match sidecar_path.as_ref().parent() {
            Some(dir) => dir.join(&self.vocab),
            None => self.vocab.clone(),
        }
    }
}
