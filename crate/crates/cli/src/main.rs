//! `mrcadapt`: corpus generation, training, evaluation, representation
//! analysis and attribution from the command line.
//!
//! Exit codes: 0 success, 2 configuration or spec error, 3 training
//! divergence, 4 checkpoint/artifact mismatch, 5 unknown input reference,
//! 1 anything else.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Environment variable that overrides the default output directory.
pub const OUT_DIR_ENV: &str = "MRCADAPT_OUT_DIR";

#[derive(Parser)]
#[command(name = "mrcadapt", version, about = "Adversarial domain adaptation for extractive reading comprehension")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Span head only, no discriminator.
    Baseline,
    /// Discriminator without the auxiliary span head.
    NoAux,
    /// Triplet discriminator with the auxiliary span head.
    Full,
    /// Full model with the distance loss instead of the triplet loss.
    Distance,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain corpus.
    GenCorpus {
        /// key=value corpus spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert external data into the JSON-lines formats used here.
    Import {
        #[arg(long, value_enum)]
        format: ImportFormat,
        #[arg(long)]
        input: PathBuf,
        /// Domain assigned to imported examples (squad only).
        #[arg(long, default_value = "target")]
        domain: String,
        /// Replace questions with [MASK] and drop answers (squad only).
        #[arg(long)]
        mask_questions: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one model per seed and evaluate on the target test set.
    Train {
        /// key=value training and model config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory produced by gen-corpus (or laid out the same way).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        /// Comma-separated seeds; overrides the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        labeled_target_ratio: Option<f64>,
    },
    /// Five-best predictions and metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines examples to answer.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        golds: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// When given, the checkpoint geometry must match this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MDS, DBSCAN and silhouette of [CLS] representations per checkpoint.
    Analyze {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Target file inside the data directory.
        #[arg(long, default_value = "target_test.jsonl")]
        target_file: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// A fixed radius or `k<q>` for the k-distance quantile rule.
        #[arg(long, default_value = "k0.9")]
        eps: String,
        #[arg(long, default_value_t = 20)]
        min_samples: usize,
        /// euclidean (on MDS coordinates) or cosine (on raw vectors).
        #[arg(long, default_value = "euclidean")]
        metric: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrated-gradients attribution of one example's answer logits.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ImportFormat {
    /// SQuAD v1.1 JSON into dataset JSON-lines.
    Squad,
    /// BioASQ golden JSON into a gold-answer file (factoid questions).
    BioasqGolds,
}

/// Error carrying a process exit code.
#[derive(Debug)]
pub struct Exit(pub u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let what = match self.0 {
            2 => "configuration error",
            3 => "training diverged",
            4 => "artifact mismatch",
            5 => "unknown input reference",
            _ => "error",
        };
        f.write_str(what)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mrcadapt::Error>() {
            return match e {
                mrcadapt::Error::Config(_) | mrcadapt::Error::Spec(_) => 2,
                mrcadapt::Error::Divergence { .. } => 3,
                mrcadapt::Error::Checkpoint(_) | mrcadapt::Error::Format(_) => 4,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus { spec, out } => commands::gen_corpus(spec.as_deref(), out),
        Command::Import { format, input, domain, mask_questions, output } => {
            commands::import(format, &input, &domain, mask_questions, &output)
        }
        Command::Train { config, data, out, mode, seeds, labeled_target_ratio } => {
            commands::train(config.as_deref(), &data, out, mode, &seeds, labeled_target_ratio)
        }
        Command::Eval { checkpoint, test, golds, vocab, config, out } => {
            commands::eval(&checkpoint, &test, &golds, &vocab, config.as_deref(), out)
        }
        Command::Analyze { checkpoints, data, target_file, repeats, eps, min_samples, metric, seed, out } => {
            commands::analyze(&checkpoints, &data, &target_file, repeats, &eps, min_samples, &metric, seed, out)
        }
        Command::Attribute { checkpoint, data, vocab, id, steps, out } => {
            commands::attribute(&checkpoint, &data, &vocab, &id, steps, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
