//! `kcr` command-line driver: argument parsing, config loading with flag
//! overrides, and exit-code mapping.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use kcr_core::eval::Metric;
use kcr_core::reason::Fusion;
use kcr_core::synth::SynthParams;

use commands::{Context, Failure};
use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kcr", version, about = "Knowledge condensation and reasoning pipeline for knowledge-based VQA")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker limit for per-sample parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory of the on-disk backend response cache.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Log per-sample failures and exit 0 instead of 1.
    #[arg(long, global = true)]
    pub skip_failed: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate dataset, visual-context, passage and implicit files.
    Ingest,
    /// Validate passages against the embedding matrix.
    Index,
    /// Retrieve the top-k passages for every sample.
    Retrieve,
    /// Condense retrieved passages into concepts and essences (resumable).
    Condense,
    /// Produce predictions and a run manifest.
    Answer {
        #[arg(long)]
        fusion: Option<Fusion>,
        /// Use the knowledge flags of one condensation-ablation row (1-10).
        #[arg(long)]
        row: Option<usize>,
    },
    /// Score a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// `min-count` or `official`.
        #[arg(long)]
        metric: Option<Metric>,
    },
    /// Run the condensation ablation rows.
    Ablate {
        /// Comma-separated row ids; all ten by default.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
    },
    /// Sweep the number of condensed knowledge items.
    Sweep {
        /// Comma-separated counts; 1..5 by default.
        #[arg(long, value_delimiter = ',')]
        ns: Vec<usize>,
    },
    /// Write a planted-answer benchmark with a ready-to-run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        planted_rank: usize,
        #[arg(long)]
        multiple_choice: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("--config is required for this command")))?;
    let mut cfg = RunConfig::load(path).map_err(Failure::Config)?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(dir) = &cli.cache_dir {
        cfg.paths.cache_dir = Some(dir.clone());
    }
    if cli.skip_failed {
        cfg.skip_failed = true;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    if let Command::Synth { out: dir, n, planted_rank, multiple_choice } = &cli.command {
        let seed = match (cli.seed, &cli.config) {
            (Some(s), _) => s,
            (None, Some(_)) => load_config(&cli)?
                .seed
                .ok_or_else(|| Failure::Config(anyhow::anyhow!("synth needs a seed")))?,
            (None, None) => return Err(Failure::Config(anyhow::anyhow!("synth needs --seed"))),
        };
        let mut params = SynthParams::new(*n, *planted_rank, seed);
        params.multiple_choice = *multiple_choice;
        return commands::synth(out, dir, params);
    }
    let cfg = load_config(&cli)?;
    cfg.validate(false, false).map_err(Failure::Config)?;
    let mut ctx = Context::new(cfg, out)?;
    match cli.command {
        Command::Ingest => commands::ingest(&mut ctx),
        Command::Index => commands::index(&mut ctx),
        Command::Retrieve => commands::retrieve(&mut ctx),
        Command::Condense => commands::condense(&mut ctx),
        Command::Answer { fusion, row } => commands::answer(&mut ctx, fusion, row),
        Command::Evaluate { predictions, metric } => commands::evaluate(&mut ctx, predictions, metric),
        Command::Ablate { rows } => commands::ablate(&mut ctx, &rows),
        Command::Sweep { ns } => commands::sweep(&mut ctx, &ns),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            EXIT_CONFIG
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUN
        }
    }
}
