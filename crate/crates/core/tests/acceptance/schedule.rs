//! Plateau schedule and checkpoint selection under scripted validation.

use std::cell::RefCell;

use pausekit::models::{Arch, EncoderConfig, ModelConfig, PauseModel};
use pausekit::nncore::ParamSet;
use pausekit::pausecat::DurationCategorizer;
use pausekit::synth::{contrasting_styles, synth_corpus, Lexicon};
use pausekit::trainkit::{prepare, train_with, ClassWeights, TrainConfig, ValMetrics};

use crate::report;

const LR_RTOL: f64 = 1e-12;

fn tiny_model(vocab_size: usize, speakers: Vec<String>) -> PauseModel {
    let mut c = ModelConfig::full_size(Arch::Baseline, vocab_size, speakers);
    c.encoder = EncoderConfig::StaticEmbedding { dim: 4 };
    c.hidden_dim = 4;
    c.bilstmp_hidden = 4;
    c.bilstmp_projection = 2;
    c.baseline_layers = 1;
    c.splice_w = 3;
    PauseModel::new(c, 0).expect("tiny model")
}

fn scores(metric: f64) -> ValMetrics {
    ValMetrics { metric, rp_f: metric, rp_threshold: 0.5, pip_f: None, pip_threshold: None }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= LR_RTOL * b.abs()
}

pub fn plateau() -> bool {
    let corpus = synth_corpus(&contrasting_styles(0.2), 8, &Lexicon::toy(), &DurationCategorizer::default(), 3).expect("corpus");
    let data: Vec<_> = corpus.utterances.iter().map(|u| u.expected.clone()).collect();
    let speakers = corpus.styles.iter().map(|s| s.speaker.clone()).collect();
    let model = tiny_model(corpus.vocab.len(), speakers);
    let prepared = prepare(&model, &corpus.vocab, &data).expect("prepare");
    let cfg = TrainConfig { batch_size: 1, max_iters: 10_000, ..Default::default() };

    // Stagnation from the start: every evaluation after iteration 0 is worse.
    let calls = RefCell::new(0usize);
    let out = train_with(model.clone(), &prepared, &cfg, &ClassWeights::default(), |_| {
        let n = calls.replace_with(|n| *n + 1);
        Ok(scores(if n == 0 { 0.5 } else { 0.4 + 0.001 * (n % 7) as f64 }))
    })
    .expect("scripted run");
    let lr_at = |it: usize| out.log.iter().find(|r| r.iteration == it).map(|r| r.lr).unwrap_or(f64::NAN);
    let expected = [(4500, 5e-5), (5000, 1e-5), (9500, 1e-5), (10_000, 2e-6)];
    let schedule_ok = expected.iter().all(|&(it, lr)| close(lr_at(it), lr))
        && out.log.iter().all(|r| {
            let want = if r.iteration < 5000 { 5e-5 } else if r.iteration < 10_000 { 1e-5 } else { 2e-6 };
            close(r.lr, want)
        });

    // Peak at iteration 1000, lower afterwards: the returned parameters must be
    // the ones the validator saw at the peak.
    let script = [0.1, 0.2, 0.6, 0.5, 0.55, 0.3, 0.59];
    let seen = RefCell::new(Vec::<ParamSet>::new());
    let cfg = TrainConfig { max_iters: 3000, ..cfg };
    let out2 = train_with(model, &prepared, &cfg, &ClassWeights::default(), |m| {
        let mut s = seen.borrow_mut();
        s.push(m.params.clone());
        Ok(scores(script[s.len() - 1]))
    })
    .expect("scripted run");
    let (argmax, _) = out2
        .log
        .iter()
        .map(|r| (r.iteration, r.val.metric))
        .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
    let snapshots = seen.into_inner();
    let checkpoint_ok = out2.best_iteration == argmax
        && argmax == 1000
        && out2.best.params == snapshots[2]
        && out2.best.params != snapshots[snapshots.len() - 1];

    report(
        "Training schedule",
        schedule_ok && checkpoint_ok,
        &format!(
            "lr {:.0e} @4500, {:.0e} @5000, {:.0e} @10000; best checkpoint at iteration {} (logged max {argmax})",
            lr_at(4500),
            lr_at(5000),
            lr_at(10_000),
            out2.best_iteration
        ),
    )
}
