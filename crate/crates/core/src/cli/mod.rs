//! Command-line surface. Summary lines go to stdout, diagnostics to stderr.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_ablate, cmd_compress, cmd_dump_scores, cmd_gen_model, cmd_sweep, ABLATION_CSV};
pub use config::{parse_grid, parse_tokens, ModelSpec, RunConfig, TaskKindSpec, TaskSpec};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kvcompose", version, about = "Composite-token KV-cache compression toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output file or directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces the base seed of the config.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Comma-separated ratio grid, replacing the config grid.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress the cache of one context and write it as KVCF.
    Compress {
        #[command(flatten)]
        common: CommonArgs,
        /// Whitespace-separated token ids.
        #[arg(long)]
        context: PathBuf,
    },
    /// Accuracy-vs-compression sweep over the ratio grid.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Sweep every aggregation configuration.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write intermediate score tensors of one context.
    DumpScores {
        #[command(flatten)]
        common: CommonArgs,
        /// Token file; defaults to the first task of the first seed.
        #[arg(long)]
        context: Option<PathBuf>,
    },
    /// Write model weights as a tensor bundle.
    GenModel {
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl CommonArgs {
    /// Loads the config and applies command-line overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed_override {
            cfg.seed = seed;
        }
        if let Some(grid) = &self.grid {
            cfg.grid = parse_grid(grid)?;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Shape(_) | Error::Invariant(_) => EXIT_FAILURE,
    }
}

/// Sizes the global thread pool from `KVCOMPOSE_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("KVCOMPOSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("KVCOMPOSE_THREADS must be a positive integer, got {raw:?}")))?;
    // A second initialization (e.g. in tests) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs a parsed command and returns its stdout lines.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    init_threads()?;
    match &cli.command {
        Command::Compress { common, context } => cmd_compress(&common.resolve()?, context),
        Command::Sweep { common } => cmd_sweep(&common.resolve()?),
        Command::Ablate { common } => cmd_ablate(&common.resolve()?),
        Command::DumpScores { common, context } => cmd_dump_scores(&common.resolve()?, context.as_deref()),
        Command::GenModel { common } => cmd_gen_model(&common.resolve()?),
    }
}

/// Parses `args`, runs the command, prints summary lines and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
