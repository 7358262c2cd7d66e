use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mstdt::checkpoint::load_checkpoint;
use mstdt::config::{parse_synth_spec, RunConfig};
use mstdt::data::{generate_synthetic, EmbeddingDataset};
use mstdt::gradcheck::grad_check;
use mstdt::model::Mstdt;
use mstdt::train::{evaluate, train, History, CONFIG_FILE};
use mstdt::{Error, Result};

/// Gradient checks at or below this relative error pass.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "mstdt", version, about = "Multi-scale temporal difference transformer over pre-extracted embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write checkpoint, config and history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report retrieval metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run config; defaults to config.txt beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarise a training history.
    Report {
        #[arg(long)]
        history: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = parse_synth_spec(&fs::read_to_string(&spec)?)?;
            let ds = generate_synthetic(&spec)?;
            ds.write_dir(&out)?;
            println!("wrote {} videos, {} captions to {}", ds.videos.len(), ds.captions.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train(&cfg, Some(&out))?;
            print!("{}", outcome.history.report());
        }
        Command::Eval { checkpoint, data, config, json } => {
            let config = config.unwrap_or_else(|| sibling(&checkpoint, CONFIG_FILE));
            let cfg = RunConfig::load(&config)?;
            let model = Mstdt::new(cfg.model.clone())?;
            let params = load_checkpoint(&checkpoint)?;
            let ds = EmbeddingDataset::load_dir(&data)?;
            let summary = evaluate(&model, &params, &ds, cfg.tie)?;
            print!("{}", summary.to_kv_text());
            if let Some(path) = json {
                fs::write(path, summary.to_json())?;
            }
        }
        Command::Gradcheck { config } => {
            let report = grad_check(&RunConfig::load(&config)?)?;
            print!("{}", report.to_text());
            let verdict = if report.passes(GRADCHECK_TOLERANCE) { "pass" } else { "fail" };
            println!("{verdict} at tolerance {GRADCHECK_TOLERANCE:e}");
        }
        Command::Report { history } => {
            print!("{}", History::from_json(&fs::read_to_string(&history)?)?.report());
        }
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |dir| dir.join(name))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mstdt: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
