//! `gibbs`: train, evaluate, sample from and analyze Gibbs machines on
//! MNIST-format data.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
//! error, 4 numeric abort.

mod commands;
mod config;
mod error;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gibbs_core::entropy::Ridge;

use commands::{Analysis, AnalyzeArgs, CanonicalizeArgs, EvalArgs, GenerateMode, SplitArg};
use config::{Binarize, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "gibbs", version, about = "Gibbs machines and auto-classifier-encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split.
    Eval(EvalCli),
    /// Decode latent grids or prior samples into image grids.
    Generate(GenerateCli),
    /// Einstein-entropy analytics of raw data.
    Analyze(AnalyzeCli),
    /// Symmetry statistics and canonical images.
    Canonicalize(CanonicalizeCli),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// MNIST directory; falls back to the `data_dir` key, then GIBBS_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// gaussian|laplacian
    #[arg(long)]
    latent_family: Option<String>,
    /// ace|vae|classifier|ace-nongen
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    decay_epochs: Option<String>,
    /// on|off
    #[arg(long)]
    dual_recon: Option<String>,
    /// Any other configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl TrainArgs {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{s}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("latent_family", &self.latent_family),
            ("arch", &self.arch),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("decay_epochs", &self.decay_epochs),
            ("dual_recon", &self.dual_recon),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Keep the first N observations; 0 keeps all.
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// auto|threshold|stochastic
    #[arg(long, default_value = "auto")]
    binarize: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
    /// Estimate −log q(x) for the first N observations.
    #[arg(long, default_value_t = 0)]
    cross_entropy: usize,
    /// Latent samples per observation for the cross-entropy estimate.
    #[arg(long, default_value_t = gibbs_core::variational::DEFAULT_SAMPLES)]
    samples: usize,
    /// Write a manifest, eval.json and cross_entropy.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Decoder to sample from; all decoders when omitted.
    #[arg(long)]
    class: Option<usize>,
    /// Sweep one latent coordinate instead of sampling the prior.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value_t = 0)]
    coord: usize,
    #[arg(long, default_value_t = 30)]
    points: usize,
    #[arg(long, default_value_t = -6.0, allow_hyphen_values = true)]
    lo: f64,
    #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
    hi: f64,
    /// Prior samples per decoder.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeCli {
    #[arg(value_enum)]
    analysis: Analysis,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// `default` or an absolute diagonal ridge.
    #[arg(long, default_value = "default")]
    ridge: String,
    /// Class for `intricates`; every class when omitted.
    #[arg(long)]
    class: Option<usize>,
    /// Intricates per class.
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args)]
struct CanonicalizeCli {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Images in the preview grids.
    #[arg(long, default_value_t = 20)]
    preview: usize,
}

fn parse_ridge(s: &str) -> Result<Ridge, CliError> {
    if s == "default" {
        return Ok(Ridge::Default);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(Ridge::Value(v)),
        _ => Err(CliError::Config(format!("ridge must be 'default' or a non-negative number, got '{s}'"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train_cmd(a.config()?, &a.out),
        Command::Eval(a) => commands::eval_cmd(&EvalArgs {
            checkpoint: a.checkpoint,
            split: a.split.into(),
            data_dir: a.data_dir,
            limit: a.limit,
            binarize: a.binarize.parse::<Binarize>()?,
            seed: a.seed,
            batch_size: a.batch_size,
            cross_entropy: a.cross_entropy,
            samples: a.samples,
            out: a.out,
        }),
        Command::Generate(a) => {
            let mode = if a.grid {
                GenerateMode::Grid {
                    coord: a.coord,
                    points: a.points,
                    lo: a.lo,
                    hi: a.hi,
                }
            } else {
                GenerateMode::Samples { count: a.samples }
            };
            commands::generate_cmd(&a.checkpoint, a.class, &mode, a.seed, &a.out)
        }
        Command::Analyze(a) => commands::analyze_cmd(&AnalyzeArgs {
            analysis: a.analysis,
            data_dir: a.data_dir,
            split: a.split.into(),
            limit: a.limit,
            ridge: parse_ridge(&a.ridge)?,
            class: a.class,
            k: a.k,
            out: a.out,
        }),
        Command::Canonicalize(a) => commands::canonicalize_cmd(&CanonicalizeArgs {
            data_dir: a.data_dir,
            split: a.split.into(),
            limit: a.limit,
            preview: a.preview,
            out: a.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
