//! `slm` command line: train, sample, eval, verify, gen-data.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use slm::cli::{self, SampleOverrides};
use slm::config::RunConfig;
use slm::data::Split;

#[derive(Parser)]
#[command(name = "slm", about = "Shortlisting model: train, sample, evaluate, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference predictor; writes metrics.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw sequences from a checkpoint; writes samples.jsonl.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of sequences to draw.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Classifier-free guidance factor (overrides the config).
        #[arg(long)]
        gamma: Option<f64>,
        /// Class label to condition on (overrides the config).
        #[arg(long)]
        cls: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the ELBO / bits-per-character on a split; writes eval.json.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the brute-force oracle suite; exits nonzero on any failure.
    Verify,
    /// Materialize the configured synthetic dataset as JSONL.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, seed, out } => {
            let config = RunConfig::load(&config).context("loading config")?;
            let outcome = cli::cmd_train(&config, out.as_deref(), seed)?;
            eprintln!(
                "[train] done; checkpoint {} metrics {}",
                outcome.checkpoint.display(),
                outcome.metrics.display()
            );
            Ok(true)
        }
        Command::Sample {
            config,
            checkpoint,
            count,
            gamma,
            cls,
            seed,
            out,
        } => {
            let config = RunConfig::load(&config).context("loading config")?;
            let overrides = SampleOverrides {
                count,
                gamma,
                cls,
                seed,
            };
            let path = cli::cmd_sample(&config, &checkpoint, &overrides, out.as_deref())?;
            eprintln!("[sample] wrote {}", path.display());
            Ok(true)
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => {
            let config = RunConfig::load(&config).context("loading config")?;
            let report = cli::cmd_eval(&config, &checkpoint, split.into(), out.as_deref())?;
            println!(
                "bpc {:.6} (total {:.6} nats, mode {}, {} sequences)",
                report.bpc, report.total_nats, report.mode, report.num_sequences
            );
            Ok(true)
        }
        Command::Verify => Ok(cli::cmd_verify()?),
        Command::GenData { config, out } => {
            let config = RunConfig::load(&config).context("loading config")?;
            let path = cli::cmd_gen_data(&config, out.as_deref())?;
            eprintln!("[gen-data] wrote {}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
