//! `pausekit`: corpus preparation, category fitting, training, evaluation
//! and text annotation for pause-insertion models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod failure;

use failure::{Failure, Kind};

#[derive(Debug, Parser)]
#[command(name = "pausekit", version, about = "Speaker-conditioned pause insertion for TTS front-ends")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub(crate) enum Command {
    /// Generate a synthetic multi-speaker corpus of alignment files.
    SynthCorpus(SynthArgs),
    /// Turn alignment files into labeled train/val/test datasets.
    PrepareCorpus(PrepareArgs),
    /// Fit duration category thresholds to the pauses of a corpus.
    FitCategories(FitArgs),
    /// Masked-token pre-training of a transformer encoder.
    PretrainEncoder(PretrainArgs),
    /// Train a pause model.
    Train(TrainArgs),
    /// Evaluate a trained model and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Find the threshold with the best F-beta for one task.
    SweepThreshold(SweepArgs),
    /// Insert pause marks into text, one sentence per line.
    Annotate(AnnotateArgs),
}

#[derive(Debug, Args)]
pub(crate) struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    sentences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON list of speaker styles; defaults to eight contrasting speakers.
    #[arg(long)]
    styles: Option<PathBuf>,
    /// Used with the default styles.
    #[arg(long, default_value_t = 0.2, conflicts_with = "styles")]
    pip_drop_rate: f64,
    /// Category thresholds the generated pause durations must respect.
    #[arg(long)]
    categorizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct PrepareArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Directory of `*.align` files.
    #[arg(long)]
    alignments: PathBuf,
    /// Fitted categorizer; the 300/700 ms defaults otherwise.
    #[arg(long)]
    categorizer: Option<PathBuf>,
    /// Output directory for train/val/test JSONL files and stats.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    /// Shuffle seed for the split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub(crate) struct FitArgs {
    #[arg(long)]
    alignments: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    components: usize,
}

#[derive(Debug, Args)]
pub(crate) struct PretrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Raw text, one sentence per line.
    #[arg(long)]
    text: PathBuf,
    /// Encoder checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args)]
pub(crate) struct EncoderArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 128)]
    ff_dim: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub(crate) enum ArchArg {
    Baseline,
    BaselineSpk,
    Rpi,
    Cpi,
}

#[derive(Debug, Args)]
pub(crate) struct TrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Output directory for the checkpoint, its config and the log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "cpi")]
    arch: ArchArg,
    /// Training configuration (JSON with TrainConfig keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    categorizer: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    plateau_iters: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Full-size dimensions (12x12x768 encoder) instead of the desk-scale
    /// defaults.
    #[arg(long, conflicts_with = "pretrained_encoder")]
    full_size: bool,
    /// RPI/CPI without the speaker embedding.
    #[arg(long)]
    no_speaker_injection: bool,
    /// Encoder checkpoint from `pretrain-encoder`; its dimensions must
    /// match the encoder flags.
    #[arg(long)]
    pretrained_encoder: Option<PathBuf>,
    /// Keep the pre-trained encoder fixed.
    #[arg(long, requires = "pretrained_encoder")]
    freeze_encoder: bool,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Decoder BiLSTM size per direction.
    #[arg(long, default_value_t = 32)]
    decoder_hidden: usize,
}

#[derive(Debug, Args)]
pub(crate) struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model config written next to the checkpoint; defaults to the
    /// checkpoint path with a `.json` extension.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the vocabulary named in the model config.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct ThresholdArgs {
    #[arg(long)]
    rp_threshold: Option<f64>,
    #[arg(long)]
    pip_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub(crate) struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Labeled dataset (JSONL).
    #[arg(long)]
    test: PathBuf,
    /// Metrics report to write (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub(crate) enum TaskArg {
    Rp,
    Pip,
}

#[derive(Debug, Args)]
pub(crate) struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Defaults to 0.5 for RPs and 2 for PIPs.
    #[arg(long)]
    beta: Option<f64>,
    /// Writes the filtered precision-recall table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct AnnotateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    speaker: Option<String>,
    /// Text file; standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Annotated text; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-token JSONL records, one line per sentence.
    #[arg(long)]
    records: Option<PathBuf>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Kind::Usage.code()) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { kind, err }) => {
            let line = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(kind.code())
        }
    }
}
