//! `vsu`: synthetic corpora, unit extraction, pretraining, finetuning and
//! the analysis suite from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] vsu::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(vsu::Error::Config(_)) => 2,
            CliError::Core(vsu::Error::NonFinite { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vsu", version, about = "Discrete speech-unit pretraining for lip reading on synthetic corpora")]
struct Cli {
    /// Worker threads; 1 makes every artifact bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Root for default artifact paths.
    #[arg(long, global = true, env = "VSU_DATA_DIR", default_value = "vsu-data")]
    data_dir: PathBuf,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArg {
    /// TOML run config; flags take precedence over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Audio,
    Visual,
}

impl From<ModalityArg> for vsu::units::Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Audio => vsu::units::Modality::Audio,
            ModalityArg::Visual => vsu::units::Modality::Visual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Representation {
    Features,
    Units,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelKind {
    Phoneme,
    Viseme,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/test corpora.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Output directory [default: DATA_DIR/corpus].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        train_utterances: Option<usize>,
        #[arg(long)]
        test_utterances: Option<usize>,
    },
    /// Fit a k-means codebook on one modality's frames.
    TrainQuantizer {
        #[command(flatten)]
        cfg: ConfigArg,
        /// [default: DATA_DIR/corpus/train]
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long)]
        k: Option<usize>,
        /// [default: DATA_DIR/codebooks/<modality>.ucbk]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantize a corpus into packed unit files, one per utterance.
    EncodeUnits {
        /// [default: DATA_DIR/corpus/train]
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the subword vocabulary on corpus transcripts.
    TrainBpe {
        #[command(flatten)]
        cfg: ConfigArg,
        /// [default: DATA_DIR/corpus/train]
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        /// [default: DATA_DIR/vocab.txt]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unit-to-text pretraining.
    Pretrain(commands::PretrainArgs),
    /// Swap in a continuous frontend and train on visual features.
    Finetune(commands::FinetuneArgs),
    /// Decode a held-out corpus and report WER.
    Eval(commands::EvalArgs),
    /// Speaker-verification EER of a representation.
    ProbeSpeaker(commands::ProbeArgs),
    /// Unit/label purity and the unit-to-label map.
    AnalyzeUnits(commands::AnalyzeArgs),
    /// Training throughput of packed units against raw frames.
    Bench(commands::BenchArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let data = cli.data_dir;
    match cli.cmd {
        Command::GenData {
            cfg,
            out,
            train_utterances,
            test_utterances,
        } => commands::gen_data(&data, &cfg, out, train_utterances, test_utterances),
        Command::TrainQuantizer {
            cfg,
            corpus,
            modality,
            k,
            out,
        } => commands::train_quantizer(&data, &cfg, corpus, modality.into(), k, out),
        Command::EncodeUnits { corpus, codebook, out } => commands::encode_units(&data, corpus, &codebook, &out),
        Command::TrainBpe { cfg, corpus, size, out } => commands::train_bpe(&data, &cfg, corpus, size, out),
        Command::Pretrain(a) => commands::pretrain(&data, &a),
        Command::Finetune(a) => commands::finetune(&data, &a),
        Command::Eval(a) => commands::eval(&data, &a),
        Command::ProbeSpeaker(a) => commands::probe_speaker(&data, &a),
        Command::AnalyzeUnits(a) => commands::analyze_units(&data, &a),
        Command::Bench(a) => commands::bench(&data, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vsu: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
