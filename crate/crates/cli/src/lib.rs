//! Subcommands of the `bevkit` binary.

pub mod commands;
pub mod render;
pub mod scenes;

use std::fmt;
use std::path::PathBuf;

use bevkit::pipeline::RunConfig;
use bevkit::BevError;
use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(BevError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => e.exit_code(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<BevError> for CliError {
    fn from(e: BevError) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const THREADS_ENV: &str = "BEVKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bevkit", version, about = "LiDAR-camera BEV fusion, HD map vectorization, evaluation and planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration JSON; defaults to the toy configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    pub fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and, optionally, a paired planning suite.
    GenSynthetic(commands::GenArgs),
    /// Run the fusion forward pass on one scene directory.
    Pipeline(commands::PipelineArgs),
    /// Evaluate a predicted map against a ground-truth map.
    Eval(commands::EvalArgs),
    /// Run the DWA planner over a scenes file.
    Plan(commands::PlanArgs),
    /// Render a BTF raster (PGM) or a map JSON (PPM).
    Render(commands::RenderArgs),
    /// Run the finite-difference gradient suite.
    CheckGrads(commands::CheckGradsArgs),
}

/// Reads `BEVKIT_THREADS` and caps the worker pool.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    bevkit::par::init_global_threads(n);
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plan(a) => commands::plan(&a),
        Command::Render(a) => commands::render(&a),
        Command::CheckGrads(a) => commands::check_grads(&a),
    }
}
