//! Command-line driver: corpus synthesis, training, sampling and evaluation.

mod commands;
mod config;
mod provenance;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use glyphdiff::conditioning::ConditioningMode;
use glyphdiff::eval::protocol::ProtocolKind;
use glyphdiff::par::Execution;
use glyphdiff::{Error, ErrorKind};

use config::{ExperimentConfig, LoadedConfig};

#[derive(Parser)]
#[command(name = "glyphdiff", version, about)]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    TextOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Textquality,
    Adaptation,
    Style,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and its adaptation split.
    Corpus {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a denoiser on the corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Blank the printed-image channel.
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate word images from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires_all = ["writer", "seed"], conflicts_with = "requests")]
        text: Option<String>,
        #[arg(long)]
        writer: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON array of {"text", "writer", "seed"} objects.
        #[arg(long, required_unless_present = "text")]
        requests: Option<PathBuf>,
        #[arg(long, default_value = "samples")]
        out_dir: PathBuf,
    },
    /// Run the configured evaluation protocol on trained checkpoints.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Corpus, training of both conditioning modes and evaluation in one go.
    Experiment {
        #[arg(value_enum)]
        preset: Preset,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: bool,
    },
}

fn load(path: &Path) -> glyphdiff::Result<LoadedConfig> {
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> glyphdiff::Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Corpus { config } => commands::corpus(&load(&config)?, exec),
        Command::Train {
            config,
            ablation,
            resume,
        } => {
            let mode = match ablation {
                Some(Ablation::TextOnly) => ConditioningMode::TextOnly,
                None => ConditioningMode::Full,
            };
            let ckpt = commands::train(&load(&config)?, mode, resume, exec)?;
            println!("{}", ckpt.display());
            Ok(())
        }
        Command::Sample {
            checkpoint,
            text,
            writer,
            seed,
            requests,
            out_dir,
        } => {
            let reqs = match (text, requests) {
                (Some(text), _) => vec![commands::RequestEntry {
                    text,
                    writer: writer.expect("clap requires --writer"),
                    seed: seed.expect("clap requires --seed"),
                }],
                (None, Some(path)) => commands::read_requests(&path)?.1,
                (None, None) => unreachable!("clap requires --text or --requests"),
            };
            for p in commands::sample(&checkpoint, &reqs, &out_dir, exec)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Eval { config } => commands::eval(&load(&config)?, exec).map(|_| ()),
        Command::Experiment {
            preset,
            config,
            resume,
        } => {
            let mut cfg = load(&config)?;
            cfg.config.eval.protocol = match preset {
                Preset::Textquality => ProtocolKind::TextQuality,
                Preset::Adaptation => ProtocolKind::Adaptation,
                Preset::Style => ProtocolKind::Style,
            };
            commands::experiment(&cfg, resume, exec)
        }
    }
}

fn fail(kind: ErrorKind, message: String, field: Option<String>) -> ExitCode {
    let mut err = serde_json::json!({
        "kind": kind.as_str(),
        "exit_code": kind.exit_code(),
        "message": message,
    });
    if let Some(f) = field {
        err["field"] = f.into();
    }
    eprintln!("{}", serde_json::json!({ "error": err }));
    ExitCode::from(kind.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail(ErrorKind::Config, e.render().to_string(), None),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let field = match &e {
                Error::Config { field, .. } => Some(field.clone()),
                _ => None,
            };
            fail(e.kind(), e.to_string(), field)
        }
    }
}
