use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use plrank_core::config::{Paths, RunConfig};
use plrank_core::pipeline::{self, ProbeKind};
use plrank_core::training::Stage;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "plrank", version, about = "Listwise ranking with reasoning policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps concurrent rollouts and evaluations.
    #[arg(long)]
    workers: Option<usize>,
    /// Puts data/, checkpoints/ and reports/ under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Sft,
    Rl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeArg {
    Position,
    HistoryShuffle,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration file holding every default.
    InitConfig { path: PathBuf },
    /// Generate the synthetic world and per-split instance files.
    GenData(Common),
    /// Build the filtered supervised corpus from the train split.
    BuildSft(Common),
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a sensitivity probe.
    Probe {
        #[arg(value_enum)]
        kind: ProbeArg,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Re-render report files from the stored evaluation.
    Report(Common),
    /// Check that every artifact carries the current config hash and seed.
    Verify(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(out) = &c.out {
        cfg.paths = Paths::under(out);
    }
    cfg.validate()?;
    log::debug!("config hash {}", cfg.hash_hex());
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("output serializes"));
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { path } => {
            if path.exists() {
                bail!("{} already exists", path.display());
            }
            std::fs::write(&path, RunConfig::default().to_json_pretty())
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Command::GenData(c) => print_json(&pipeline::gen_data(&load_config(&c)?)?),
        Command::BuildSft(c) => print_json(&pipeline::build_sft(&load_config(&c)?)?),
        Command::Train { common, stage, init } => {
            let stage = match stage {
                StageArg::Sft => Stage::Sft,
                StageArg::Rl => Stage::Rl,
            };
            let out = pipeline::train(&load_config(&common)?, stage, init.as_deref())?;
            print_json(&serde_json::json!({ "checkpoint": display(&out) }));
        }
        Command::Eval { common, checkpoint } => {
            let r = pipeline::eval(&load_config(&common)?, checkpoint.as_deref())?;
            print_json(&serde_json::json!({ "overall": r.overall, "excluded": r.excluded }));
        }
        Command::Probe { kind, common, checkpoint } => {
            let kind = match kind {
                ProbeArg::Position => ProbeKind::Position,
                ProbeArg::HistoryShuffle => ProbeKind::HistoryShuffle,
            };
            let files = pipeline::probe(&load_config(&common)?, kind, checkpoint.as_deref())?;
            print_json(&files.iter().map(|p| display(p)).collect::<Vec<_>>());
        }
        Command::Report(c) => {
            let r = pipeline::report(&load_config(&c)?)?;
            print_json(&serde_json::json!({ "overall": r.overall }));
        }
        Command::Verify(c) => {
            let checks = pipeline::verify(&load_config(&c)?)?;
            let bad: Vec<_> = checks.iter().filter(|v| !v.ok).collect();
            for v in &checks {
                log::info!("{}: {}", v.path.display(), v.detail);
            }
            if let Some(v) = bad.first() {
                bail!("{} of {} artifacts fail verification; first: {}: {}", bad.len(), checks.len(), v.path.display(), v.detail);
            }
            print_json(&serde_json::json!({ "verified": checks.len() }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PLRANK_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({ "error": msg }));
            ExitCode::FAILURE
        }
    }
}
