//! The controlled speaker experiment: eight speakers with contradictory
//! phrasing styles, models with and without the speaker embedding, and a
//! CPI model on the same data.

use std::time::Instant;

use pausekit::evalkit::{sweep_threshold, BETA_PIP};
use pausekit::models::{Arch, EncoderConfig, ModelConfig, PauseModel};
use pausekit::nncore::layers::Positional;
use pausekit::pausecat::DurationCategorizer;
use pausekit::synth::{contrasting_styles, synth_corpus, Lexicon};
use pausekit::trainkit::{
    compute_class_weights, predict_all, prepare, train, validation_metrics, ClassWeights, TrainConfig, TrainOutcome,
};
use pausekit::{LabeledSentence, PauseKind, Vocabulary};

use crate::report;

pub const MIN_SPK_F: f64 = 0.90;
pub const MAX_NOSPK_F: f64 = 0.75;
pub const MIN_GAP: f64 = 0.15;
pub const MIN_PIP_RECALL: f64 = 0.99;
pub const BUDGET_SECS: f64 = 15.0 * 60.0;

const RPI_ITERS: usize = 1000;
const CPI_ITERS: usize = 1000;

fn config(arch: Arch, vocab: &Vocabulary, speakers: Vec<String>, inject: bool) -> ModelConfig {
    let mut c = ModelConfig::full_size(arch, vocab.len(), speakers);
    c.encoder = EncoderConfig::Transformer { layers: 2, heads: 4, model_dim: 64, ff_dim: 128, positional: Positional::Sinusoidal };
    c.hidden_dim = 64;
    c.decoder_bilstm_hidden = 32;
    c.speaker_injection = inject;
    c
}

fn run(
    arch: Arch,
    inject: bool,
    iters: usize,
    data: (&[LabeledSentence], &[LabeledSentence]),
    vocab: &Vocabulary,
    speakers: &[String],
    weights: &ClassWeights,
) -> TrainOutcome {
    let model = PauseModel::new(config(arch, vocab, speakers.to_vec(), inject), 1).expect("model");
    let cfg = train_config(iters);
    train(model, vocab, data.0, data.1, &cfg, weights).expect("training")
}

fn train_config(iters: usize) -> TrainConfig {
    TrainConfig { lr0: 2e-3, eval_every: 200, plateau_iters: 1000, max_iters: iters, seed: 1, ..Default::default() }
}

pub fn experiment() -> (bool, bool) {
    let start = Instant::now();
    let corpus = synth_corpus(&contrasting_styles(0.2), 2800, &Lexicon::toy(), &DurationCategorizer::default(), 7).expect("corpus");
    let data: Vec<LabeledSentence> = corpus.utterances.iter().map(|u| u.expected.clone()).collect();
    let (train_set, rest) = data.split_at(2000);
    let (val, test) = rest.split_at(400);
    let speakers: Vec<String> = corpus.styles.iter().map(|s| s.speaker.clone()).collect();
    let vocab = &corpus.vocab;
    let split = (train_set, val);
    let cfg = train_config(0);

    let test_f = |m: &PauseModel| {
        let p = prepare(m, vocab, test).expect("prepare");
        validation_metrics(m, &p, &cfg).expect("metrics")
    };
    let plain = ClassWeights::default();
    let spk = test_f(&run(Arch::Rpi, true, RPI_ITERS, split, vocab, &speakers, &plain).best);
    let nospk = test_f(&run(Arch::Rpi, false, RPI_ITERS, split, vocab, &speakers, &plain).best);

    let weights = compute_class_weights(&pausekit::corpus::compute_stats(train_set)).expect("weights");
    let cpi = run(Arch::Cpi, true, CPI_ITERS, split, vocab, &speakers, &weights).best;
    let prepared = prepare(&cpi, vocab, test).expect("prepare");
    let outputs = predict_all(&cpi, &prepared, 32).expect("predict");
    let (mut probs, mut labels, mut tokens) = (Vec::new(), Vec::new(), Vec::new());
    for (s, o) in test.iter().zip(&outputs) {
        probs.extend_from_slice(o.pip_prob.as_ref().expect("CPI has a PIP head"));
        labels.extend_from_slice(&s.p_pip);
        tokens.extend(s.tokens.iter().cloned());
    }
    let pip = sweep_threshold(&probs, &labels, &tokens, BETA_PIP, PauseKind::Pip).expect("sweep").best;
    let secs = start.elapsed().as_secs_f64();

    let gap = spk.rp_f - nospk.rp_f;
    let in_budget = secs <= BUDGET_SECS;
    let speaker_pass = spk.rp_f >= MIN_SPK_F && nospk.rp_f <= MAX_NOSPK_F && gap >= MIN_GAP && in_budget;
    let a = report(
        "Speaker conditioning",
        speaker_pass,
        &format!(
            "test F0.5 {:.4} with speakers, {:.4} without, gap {gap:.4} (need >= {MIN_SPK_F}, <= {MAX_NOSPK_F}, >= {MIN_GAP}); {secs:.0} s for all three models (budget {BUDGET_SECS:.0} s)",
            spk.rp_f, nospk.rp_f
        ),
    );
    let b = report(
        "CPI PIP recall",
        pip.recall >= MIN_PIP_RECALL && in_budget,
        &format!(
            "recall {:.4} at the F2-optimal threshold {:.4} (F2 {:.4}, precision {:.4}; need >= {MIN_PIP_RECALL})",
            pip.recall, pip.threshold, pip.f, pip.precision
        ),
    );
    (a, b)
}
