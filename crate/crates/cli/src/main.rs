use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod export;
mod run;

use config::{ConfigError, RunConfig};

/// Exit statuses.
pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED_CHECK: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_BLOWUP: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "kinemix", version, about = "Hard-sphere gas mixture kinetics: property checks, simulation and plot export")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file (defaults apply when absent).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run only these suites (comma separated), `verify` only.
    #[arg(long, global = true, value_delimiter = ',')]
    only: Vec<String>,

    /// Directory for cached linearized operators.
    #[arg(long, global = true)]
    tensor_cache: Option<PathBuf>,

    /// Write a checkpoint every N steps.
    #[arg(long, global = true)]
    checkpoint_every: Option<u64>,

    /// Seed for the randomized suites.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (the run directory for `export-plots`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Run the property suites.
    Verify,
    /// Run a transport simulation with streaming diagnostics.
    Simulate,
    /// Convert a run's record stream into one table per diagnostic.
    ExportPlots,
}

/// Error carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(format!("config error: {e}"))
    }
}

impl From<kinemix_core::Error> for Failure {
    fn from(e: kinemix_core::Error) -> Self {
        let code = if e.is_config() {
            EXIT_CONFIG
        } else if e.is_blowup() || matches!(e, kinemix_core::Error::ProjectionDrift { .. }) {
            EXIT_BLOWUP
        } else {
            EXIT_FAILED_CHECK
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_FAILED_CHECK, format!("i/o error: {e}"))
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("KINEMIX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("KINEMIX_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("thread pool: {e}")))
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.checkpoint_every {
        cfg.output.checkpoint_every = n;
    }
    if let Some(d) = &cli.out {
        cfg.output.dir = d.clone();
    }
    if let Some(d) = &cli.tensor_cache {
        cfg.output.tensor_cache = Some(d.clone());
    }
    if !cli.only.is_empty() {
        if cli.command != Command::Verify {
            return Err(Failure::config("--only applies to `verify`"));
        }
        cfg.diagnostics.checks = cli.only.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<u8, Failure> {
    init_threads()?;
    if cli.command == Command::ExportPlots {
        let dir = cli.out.clone().ok_or_else(|| Failure::config("export-plots needs --out <run dir>"))?;
        return export::export_plots(&dir);
    }
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Verify => run::verify(&cfg),
        Command::Simulate => run::simulate(&cfg),
        Command::ExportPlots => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("kinemix: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
