use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use pausekit::annotate::{annotate, render};
use pausekit::corpus::{compute_stats, label_alignment, pause_durations, read_alignment_file, read_dataset, write_dataset};
use pausekit::evalkit::{curve_table, evaluate, pr_curve, sweep_threshold, BETA_PIP, BETA_RP};
use pausekit::models::{Arch, DecisionThresholds, EncoderConfig, ModelConfig, ModelSidecar, PauseModel};
use pausekit::nncore::layers::{Positional, TransformerConfig};
use pausekit::nncore::ParamSet;
use pausekit::pausecat::{fit_categorizer, CategorizerFile, FitOptions};
use pausekit::synth::{contrasting_styles, synth_corpus, Lexicon, SpeakerStyle};
use pausekit::textnorm::tokenize_sentence;
use pausekit::trainkit::{
    compute_class_weights, mlm_pretrain, predict_all, prepare, train, ClassWeights, MlmConfig, TrainConfig, TrainError,
};
use pausekit::{DurationCategorizer, LabeledSentence, PauseKind, Vocabulary};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::failure::{Classify, CmdResult, Failure, Kind};
use crate::{
    AnnotateArgs, ArchArg, Command, EncoderArgs, EvaluateArgs, FitArgs, ModelArgs, PrepareArgs, PretrainArgs, SweepArgs,
    SynthArgs, TaskArg, ThresholdArgs, TrainArgs,
};

pub fn run(command: Command) -> CmdResult {
    match command {
        Command::SynthCorpus(a) => synth(a),
        Command::PrepareCorpus(a) => prepare_corpus(a),
        Command::FitCategories(a) => fit_categories(a),
        Command::PretrainEncoder(a) => pretrain(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::SweepThreshold(a) => sweep(a),
        Command::Annotate(a) => annotate_cmd(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path).data(format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).data(format!("malformed JSON in {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).data(format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).data(format!("cannot write {}", path.display()))
}

fn load_vocab(path: &Path) -> CmdResult<Vocabulary> {
    Vocabulary::from_file(path).data("cannot load vocabulary")
}

fn load_categorizer(path: Option<&Path>) -> CmdResult<DurationCategorizer> {
    match path {
        None => Ok(DurationCategorizer::default()),
        Some(p) => {
            let file: CategorizerFile = read_json(p)?;
            file.categorizer().data(format!("invalid thresholds in {}", p.display()))
        }
    }
}

fn load_dataset(path: &Path) -> CmdResult<Vec<LabeledSentence>> {
    let data = read_dataset(path).data("cannot read dataset")?;
    if data.is_empty() {
        return Err(Failure::data(format!("dataset {} is empty", path.display())));
    }
    Ok(data)
}

/// `*.align` files of a directory in name order.
fn alignment_files(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).data(format!("cannot list {}", dir.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let path = e.data(format!("cannot list {}", dir.display()))?.path();
        if path.extension().is_some_and(|x| x == "align") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Failure::data(format!("no .align files in {}", dir.display())));
    }
    Ok(files)
}

fn synth(a: SynthArgs) -> CmdResult {
    let styles: Vec<SpeakerStyle> = match &a.styles {
        Some(p) => read_json(p)?,
        None => contrasting_styles(a.pip_drop_rate),
    };
    let categorizer = load_categorizer(a.categorizer.as_deref())?;
    let corpus = synth_corpus(&styles, a.sentences, &Lexicon::toy(), &categorizer, a.seed).data("cannot generate corpus")?;
    corpus.write(&a.out).data("cannot write corpus")?;
    println!("wrote {} utterances from {} speakers to {}", corpus.utterances.len(), styles.len(), a.out.display());
    Ok(())
}

fn prepare_corpus(a: PrepareArgs) -> CmdResult {
    let fractions = a.val_fraction + a.test_fraction;
    if !(0.0..1.0).contains(&a.val_fraction) || !(0.0..1.0).contains(&a.test_fraction) || fractions >= 1.0 {
        return Err(Failure::usage("split fractions must be in [0, 1) and leave room for training data"));
    }
    let vocab = load_vocab(&a.vocab)?;
    let categorizer = load_categorizer(a.categorizer.as_deref())?;
    let mut data = Vec::new();
    for path in alignment_files(&a.alignments)? {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let alignment = read_alignment_file(&path).data(format!("{}", path.display()))?;
        data.push(label_alignment(&id, &alignment, &vocab, &categorizer).data(format!("{}", path.display()))?);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
    let n = data.len();
    let n_val = (n as f64 * a.val_fraction).round() as usize;
    let n_test = (n as f64 * a.test_fraction).round() as usize;
    let pick = |idx: &[usize]| -> Vec<LabeledSentence> {
        let mut idx = idx.to_vec();
        idx.sort();
        idx.iter().map(|&i| data[i].clone()).collect()
    };
    let val = pick(&order[..n_val]);
    let test = pick(&order[n_val..n_val + n_test]);
    let train_set = pick(&order[n_val + n_test..]);

    fs::create_dir_all(&a.out).data(format!("cannot create {}", a.out.display()))?;
    let mut stats = serde_json::Map::new();
    for (name, split) in [("train", &train_set), ("val", &val), ("test", &test)] {
        write_dataset(a.out.join(format!("{name}.jsonl")), split).data("cannot write dataset")?;
        let s = compute_stats(split);
        println!(
            "{name}: {} sentences, {} tokens, {} RPs {:?}, {} PIPs {:?}",
            s.sentences, s.tokens, s.rp_total, s.rp_counts, s.pip_total, s.pip_counts
        );
        stats.insert(name.into(), serde_json::to_value(s).expect("stats serialize"));
    }
    stats.insert("category_thresholds".into(), serde_json::json!(categorizer.thresholds()));
    write_text(&a.out.join("stats.json"), &(serde_json::to_string_pretty(&stats).expect("json") + "\n"))
}

fn fit_categories(a: FitArgs) -> CmdResult {
    let mut durations = Vec::new();
    for path in alignment_files(&a.alignments)? {
        let alignment = read_alignment_file(&path).data(format!("{}", path.display()))?;
        let events = pause_durations(&alignment).data(format!("{}", path.display()))?;
        durations.extend(events.iter().map(|e| e.duration_ms as f64));
    }
    let opts = FitOptions { components: a.components, ..Default::default() };
    let (fit, cutoffs, categorizer) = fit_categorizer(&durations, opts).data("cannot fit categories")?;
    for c in cutoffs.iter().filter(|c| c.midpoint_fallback) {
        eprintln!("warning: no density crossing near {:.1} ms, used the midpoint between means", c.value);
    }
    let file = CategorizerFile::new(&fit.gmm, &categorizer);
    write_text(&a.out, &(serde_json::to_string_pretty(&file).expect("json") + "\n"))?;
    println!(
        "{} pauses, {} EM iterations, thresholds {:?} ms",
        durations.len(),
        fit.iterations,
        categorizer.thresholds()
    );
    Ok(())
}

fn transformer_config(e: &EncoderArgs, vocab_size: usize) -> TransformerConfig {
    TransformerConfig {
        vocab_size,
        layers: e.layers,
        heads: e.heads,
        model_dim: e.model_dim,
        ff_dim: e.ff_dim,
        positional: Positional::Sinusoidal,
    }
}

fn read_sentences(path: &Path) -> CmdResult<Vec<String>> {
    let text = fs::read_to_string(path).data(format!("cannot read {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn pretrain(a: PretrainArgs) -> CmdResult {
    let vocab = load_vocab(&a.vocab)?;
    let tcfg = transformer_config(&a.encoder, vocab.len());
    let mut sentences = Vec::new();
    for line in read_sentences(&a.text)? {
        sentences.push(tokenize_sentence(&line, &vocab).data("cannot tokenize text")?);
    }
    let cfg = MlmConfig { mask_rate: a.mask_rate, iters: a.iters, batch_size: a.batch_size, lr: a.lr, seed: a.seed };
    let out = mlm_pretrain(&sentences, &vocab, &tcfg, &cfg).map_err(classify_train)?;
    out.encoder.save(&a.out).data("cannot save encoder")?;
    if let (Some(first), Some(last)) = (out.losses.first(), out.losses.last()) {
        println!("masked-token loss {first:.4} -> {last:.4}");
    }
    Ok(())
}

fn classify_train(e: TrainError) -> Failure {
    let internal = matches!(e, TrainError::NonFinite { .. } | TrainError::Nn(_) | TrainError::Optimizer(..));
    let kind = if internal { Kind::Internal } else { Kind::Data };
    Failure { kind, err: anyhow::Error::new(e).context("training failed") }
}

fn model_config(a: &TrainArgs, vocab_size: usize, speakers: Vec<String>) -> ModelConfig {
    let arch = match a.arch {
        ArchArg::Baseline => Arch::Baseline,
        ArchArg::BaselineSpk => Arch::BaselineSpk,
        ArchArg::Rpi => Arch::Rpi,
        ArchArg::Cpi => Arch::Cpi,
    };
    let mut c = ModelConfig::full_size(arch, vocab_size, speakers);
    c.speaker_injection = !a.no_speaker_injection;
    if a.full_size {
        return c;
    }
    let d = a.encoder.model_dim;
    c.encoder = if c.is_baseline() {
        EncoderConfig::StaticEmbedding { dim: d }
    } else {
        EncoderConfig::Transformer {
            layers: a.encoder.layers,
            heads: a.encoder.heads,
            model_dim: d,
            ff_dim: a.encoder.ff_dim,
            positional: Positional::Sinusoidal,
        }
    };
    c.hidden_dim = d;
    c.decoder_bilstm_hidden = a.decoder_hidden;
    c.bilstmp_hidden = 2 * a.decoder_hidden;
    c.bilstmp_projection = a.decoder_hidden;
    c
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let vocab = load_vocab(&a.vocab)?;
    let categorizer = load_categorizer(a.categorizer.as_deref())?;
    let train_set = load_dataset(&a.train)?;
    let val_set = load_dataset(&a.val)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.plateau_iters {
        cfg.plateau_iters = v;
    }
    if let Some(v) = a.lr0 {
        cfg.lr0 = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate().map_err(Failure::usage)?;

    let mut speakers: Vec<String> = train_set.iter().map(|s| s.speaker.clone()).collect();
    speakers.sort();
    speakers.dedup();
    let mut mc = model_config(&a, vocab.len(), speakers);
    if a.freeze_encoder {
        mc.encoder_trainable = false;
    }
    let mut model = PauseModel::new(mc, cfg.seed).data("invalid model configuration")?;
    if let Some(p) = &a.pretrained_encoder {
        let enc = ParamSet::load(p).data(format!("cannot load encoder {}", p.display()))?;
        model.load_encoder(&enc).data("pre-trained encoder does not fit the model")?;
    }
    let weights = if model.config.arch == Arch::Cpi {
        compute_class_weights(&compute_stats(&train_set)).data("cannot compute class weights")?
    } else {
        ClassWeights::default()
    };

    let outcome = train(model, &vocab, &train_set, &val_set, &cfg, &weights).map_err(classify_train)?;

    fs::create_dir_all(&a.out).data(format!("cannot create {}", a.out.display()))?;
    let ckpt = a.out.join("model.ckpt");
    outcome.best.params.save(&ckpt).data("cannot save checkpoint")?;
    let vocab_copy = a.out.join("vocab.txt");
    write_text(&vocab_copy, &vocab.to_text())?;
    let mut sidecar = ModelSidecar::new(outcome.best.config.clone(), "vocab.txt", categorizer.thresholds().to_vec());
    sidecar.decision = DecisionThresholds {
        rp: outcome.best_val.rp_threshold,
        pip: outcome.best_val.pip_threshold.unwrap_or(0.5),
    };
    sidecar.notes.insert("best_iteration".into(), outcome.best_iteration.to_string());
    sidecar.notes.insert("best_val_metric".into(), format!("{:.6}", outcome.best_val.metric));
    sidecar.save(a.out.join("model.json")).data("cannot save model config")?;

    let mut log = String::new();
    for r in &outcome.log {
        log.push_str(&serde_json::to_string(r).expect("log serializes"));
        log.push('\n');
    }
    write_text(&a.out.join("train_log.jsonl"), &log)?;
    println!(
        "best validation metric {:.4} at iteration {}; wrote {}",
        outcome.best_val.metric,
        outcome.best_iteration,
        ckpt.display()
    );
    Ok(())
}

fn load_model(m: &ModelArgs) -> CmdResult<(PauseModel, Vocabulary, ModelSidecar)> {
    let config = m.config.clone().unwrap_or_else(|| m.checkpoint.with_extension("json"));
    let sidecar = ModelSidecar::load(&config).data("cannot load model config")?;
    let vocab_path = m.vocab.clone().unwrap_or_else(|| sidecar.vocab_path(&config));
    let vocab = load_vocab(&vocab_path)?;
    let params = ParamSet::load(&m.checkpoint).data(format!("cannot load checkpoint {}", m.checkpoint.display()))?;
    let model = PauseModel::from_parts(sidecar.model.clone(), params).data("checkpoint and config disagree")?;
    if vocab.len() != model.config.vocab_size {
        return Err(Failure::data(format!(
            "vocabulary {} has {} entries, model expects {}",
            vocab_path.display(),
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab, sidecar))
}

fn thresholds(t: &ThresholdArgs, sidecar: &ModelSidecar) -> DecisionThresholds {
    DecisionThresholds {
        rp: t.rp_threshold.unwrap_or(sidecar.decision.rp),
        pip: t.pip_threshold.unwrap_or(sidecar.decision.pip),
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> CmdResult {
    let (model, vocab, sidecar) = load_model(&a.model)?;
    let data = load_dataset(&a.test)?;
    let prepared = prepare(&model, &vocab, &data).map_err(classify_train)?;
    let outputs = predict_all(&model, &prepared, 32).map_err(classify_train)?;
    let th = thresholds(&a.thresholds, &sidecar);
    let report = evaluate(&data, &outputs, th).data("cannot evaluate")?;
    write_text(&a.out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    let tasks = [("RP", Some(&report.rp)), ("PIP", report.pip.as_ref())];
    for (name, task) in tasks {
        let Some(t) = task else { continue };
        println!(
            "{name}: threshold {:.4} precision {:.4} recall {:.4} F{} {:.4} (best {:.4} at {:.4})",
            t.threshold, t.precision, t.recall, t.beta, t.f, t.best.f, t.best.threshold
        );
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> CmdResult {
    let (model, vocab, _) = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    let prepared = prepare(&model, &vocab, &data).map_err(classify_train)?;
    let outputs = predict_all(&model, &prepared, 32).map_err(classify_train)?;
    let (kind, default_beta) = match a.task {
        TaskArg::Rp => (PauseKind::Rp, BETA_RP),
        TaskArg::Pip => (PauseKind::Pip, BETA_PIP),
    };
    let beta = a.beta.unwrap_or(default_beta);
    let mut tokens = Vec::new();
    let (mut probs, mut labels) = (Vec::new(), Vec::new());
    for (s, o) in data.iter().zip(&outputs) {
        let p = match kind {
            PauseKind::Rp => &o.rp_prob,
            PauseKind::Pip => o
                .pip_prob
                .as_ref()
                .ok_or_else(|| Failure::usage("this model has no PIP head; use --task rp"))?,
        };
        tokens.extend(s.tokens.iter().cloned());
        probs.extend_from_slice(p);
        labels.extend_from_slice(if kind == PauseKind::Rp { &s.p_rp } else { &s.p_pip });
    }
    let result = sweep_threshold(&probs, &labels, &tokens, beta, kind).data("sweep failed")?;
    if let Some(out) = &a.out {
        write_text(out, &curve_table(&pr_curve(&result.points)))?;
    }
    let b = result.best;
    println!(
        "best threshold {:.6} F{beta} {:.4} precision {:.4} recall {:.4}",
        b.threshold, b.f, b.precision, b.recall
    );
    Ok(())
}

fn annotate_cmd(a: AnnotateArgs) -> CmdResult {
    let (model, vocab, sidecar) = load_model(&a.model)?;
    let th = thresholds(&a.thresholds, &sidecar);
    let lines: Vec<String> = match &a.input {
        Some(p) => read_sentences(p)?,
        None => io::stdin()
            .lock()
            .lines()
            .collect::<Result<Vec<_>, _>>()
            .data("cannot read standard input")?
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .collect(),
    };
    let mut text = String::new();
    let mut records = String::new();
    for line in &lines {
        let tokens = annotate(line, a.speaker.as_deref(), &model, &vocab, th).data(format!("cannot annotate {line:?}"))?;
        text.push_str(&render(&tokens));
        text.push('\n');
        records.push_str(&serde_json::to_string(&tokens).expect("records serialize"));
        records.push('\n');
    }
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => {
            let mut out = BufWriter::new(io::stdout().lock());
            out.write_all(text.as_bytes()).data("cannot write output")?;
            out.flush().data("cannot write output")?;
        }
    }
    if let Some(p) = &a.records {
        write_text(p, &records)?;
    }
    Ok(())
}
