//! `sift` command-line driver: training runs, archive merging, descent probes
//! and effective-rank reports.
//!
//! Exit codes: 0 success, 2 usage/config/layout errors, 3 numerical failures.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sift_core::telemetry::ExportFormat;
use sift_core::testbed::ProbeDirection;

use crate::commands::{MergeMode, RankSource};
use crate::config::RunConfig;
use crate::error::{CliError, Result, EXIT_USAGE};

/// Environment variable capping the worker threads used across blocks.
pub const THREADS_ENV: &str = "SIFT_OPT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sift", version, about = "Spectral interference-free training toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a synthetic task; writes an archive, telemetry and a summary.
    Run(RunArgs),
    /// Merge two fine-tuned archives into a base archive.
    Merge(MergeArgs),
    /// Loss curves of f along the full, projected and removed gradient parts.
    Probe(ProbeArgs),
    /// Effective ranks of an archive's blocks or a run's momentum trace.
    Rank(RankArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Seed for the task draw (overrides the config).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Config override, e.g. `optimizer.eta=0.05`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<ExportFormat>,
}

impl ConfigArgs {
    /// Config with overrides and command-line flags applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = config::load(&self.config, &self.overrides)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
        if let Some(format) = self.format {
            config.format = Some(format);
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Directions to probe (default: the config's list).
    #[arg(long = "direction", value_delimiter = ',', value_parser = parse_direction)]
    pub directions: Vec<ProbeDirection>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long, value_name = "DIR")]
    pub base: PathBuf,
    #[arg(long = "ft-f", value_name = "DIR")]
    pub ft_f: PathBuf,
    #[arg(long = "ft-g", value_name = "DIR")]
    pub ft_g: PathBuf,
    #[arg(long, value_enum, default_value = "whitened")]
    pub mode: MergeMode,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    pub format: ExportFormat,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Model archive directory.
    #[arg(long, value_name = "DIR", required_unless_present = "telemetry", conflicts_with = "telemetry")]
    pub archive: Option<PathBuf>,
    /// Telemetry directory of a run recorded with `optimizer.rank_alpha`.
    #[arg(long, value_name = "DIR")]
    pub telemetry: Option<PathBuf>,
    /// Energy levels in (0, 1]; repeatable or comma separated.
    #[arg(long = "alpha", value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Write `rank.{csv,json}` here instead of printing.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    pub format: ExportFormat,
}

fn parse_format(s: &str) -> std::result::Result<ExportFormat, String> {
    s.parse().map_err(|e: sift_core::Error| e.to_string())
}

fn parse_direction(s: &str) -> std::result::Result<ProbeDirection, String> {
    s.parse().map_err(|e: sift_core::Error| e.to_string())
}

/// Caps the global rayon pool from `SIFT_OPT_THREADS` when set.
pub fn configure_threads(value: Option<&str>) -> Result<()> {
    let Some(raw) = value else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // Fails only if the pool was already built, in which case it stays as is.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn require_out(config: &RunConfig) -> Result<&Path> {
    config
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out` in the config".into()))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.common.resolve()?;
            let out = require_out(&config)?;
            let summary = commands::run(&config, out, config.format.unwrap_or_default())?;
            let r = &summary["results"];
            println!(
                "{} steps: f = {}, g = {}, {} activated (step, block) pairs; wrote {}",
                r["steps"],
                r["final_f_loss"],
                r["final_g_loss"],
                r["activations"],
                out.display()
            );
        }
        Command::Probe(args) => {
            let config = args.common.resolve()?;
            let directions = if args.directions.is_empty() {
                config.probe.directions.clone()
            } else {
                args.directions
            };
            let format = config.format.unwrap_or_default();
            if let Some(path) = commands::probe(&config, &directions, config.out.as_deref(), format)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Merge(args) => {
            let warnings = commands::merge(&args.base, &args.ft_f, &args.ft_g, args.mode, &args.out, args.format)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", args.out.display());
        }
        Command::Rank(args) => {
            let source = match (&args.archive, &args.telemetry) {
                (Some(a), _) => RankSource::Archive(a),
                (None, Some(t)) => RankSource::Telemetry(t),
                (None, None) => unreachable!("clap enforces one input"),
            };
            if let Some(path) = commands::rank(source, &args.alphas, args.out.as_deref(), args.format)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I, threads: Option<&str>) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = configure_threads(threads).and_then(|()| execute(cli));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
