use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use microstudy_cli::commands::{self, ExportFormat, StudyConfig};
use microstudy_cli::server::{self, AppState};
use microstudy_core::SystemClock;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "microstudy", version, about = "Crowd-driven two-phase sleep study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP/JSON API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "MICROSTUDY_PORT", default_value_t = 8080)]
        port: u16,
        /// Directory for campaign logs; overrides the config file.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run a simulated study in process.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k hypotheses from a campaign log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Crossover analysis from a campaign log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
    },
    /// Hypothesis table from a campaign log.
    Export {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
        format: ExportFormat,
    },
}

fn load(config: Option<PathBuf>) -> anyhow::Result<StudyConfig> {
    config.map_or_else(|| Ok(StudyConfig::default()), |p| StudyConfig::load(&p))
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: String) -> anyhow::Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Serve { config, port, data_dir } => {
            let cfg = load(config)?;
            let clock = Arc::new(SystemClock::default());
            let state = match data_dir.or(cfg.data_dir.clone()) {
                Some(dir) => AppState::recover(&dir, clock)?,
                None => AppState::new(None, clock),
            };
            if state.get("default").is_none() {
                state.create(Some("default".into()), cfg.campaign)?;
            }
            let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
            runtime.block_on(server::serve(Arc::new(state), SocketAddr::from(([0, 0, 0, 0], port))))?;
        }
        Command::Simulate { config, seed, out } => {
            let summary = commands::simulate(&load(config)?, seed, &out)?;
            emit(serde_json::to_string_pretty(&summary)? + "\n")?;
        }
        Command::Report { log, k } => {
            emit(serde_json::to_string_pretty(&commands::report(&log, k)?)? + "\n")?;
        }
        Command::Analyze { log } => {
            emit(serde_json::to_string_pretty(&commands::analyze(&log)?)? + "\n")?;
        }
        Command::Export { log, format } => {
            emit(commands::export(&log, format)?)?;
        }
    }
    Ok(())
}
