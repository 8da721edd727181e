//! Run diagnostics: per-(step, block) alignment records, loss curves,
//! activation sparsity, conflict-count margins and effective-rank traces,
//! plus lossless CSV/JSON export.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::{Method, OptimizerConfig};
use crate::spectral::{compact_svd, EnergyProfile, DEFAULT_RANK_TOL};

pub const ALIGNMENT_FILE: &str = "alignment.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const SPARSITY_FILE: &str = "sparsity.csv";
pub const RANK_FILE: &str = "rank_trace.csv";
pub const META_FILE: &str = "telemetry_meta.json";
pub const JSON_FILE: &str = "telemetry.json";

/// Threshold used by the conflict-count margins unless told otherwise.
pub const DEFAULT_COUNT_THRESHOLD: f64 = -0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub step: usize,
    pub block_index: usize,
    pub block_name: String,
    pub tau: f64,
    pub activated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub f_loss: f64,
    pub g_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub step: usize,
    pub block_index: usize,
    pub alpha: f64,
    pub effective_rank: usize,
    /// The momentum was zero; `effective_rank` is then 0.
    pub zero_momentum: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTelemetry {
    pub alignment: Vec<AlignmentRecord>,
    pub losses: Vec<LossRecord>,
    pub rank_trace: Option<Vec<RankRecord>>,
    /// Resolved configuration of the run.
    pub config: Value,
}

impl RunTelemetry {
    pub fn new(method: Method, config: &OptimizerConfig) -> Self {
        Self {
            alignment: Vec::new(),
            losses: Vec::new(),
            rank_trace: None,
            config: json!({ "method": method, "optimizer": config }),
        }
    }

    /// Activated `(step, block)` pairs.
    pub fn activations(&self) -> BTreeSet<(usize, usize)> {
        self.alignment
            .iter()
            .filter(|r| r.activated)
            .map(|r| (r.step, r.block_index))
            .collect()
    }

    /// Checks the record invariants: one alignment record per `(step, block)`
    /// in `(step, block)` order with steps contiguous from 0, and activation
    /// only where `τ < epsilon`.
    pub fn validate(&self, epsilon: f64) -> Result<()> {
        let blocks = self
            .alignment
            .iter()
            .map(|r| r.block_index)
            .max()
            .map_or(0, |b| b + 1);
        for (i, r) in self.alignment.iter().enumerate() {
            if r.step != i / blocks || r.block_index != i % blocks {
                return Err(Error::InvalidInput(format!(
                    "alignment record {i} is (step {}, block {}), expected (step {}, block {})",
                    r.step,
                    r.block_index,
                    i / blocks,
                    i % blocks
                )));
            }
            if r.activated && !(r.tau < epsilon) {
                return Err(Error::InvalidInput(format!(
                    "step {}, block {}: activated with tau {} >= epsilon {epsilon}",
                    r.step, r.block_index, r.tau
                )));
            }
        }
        if blocks > 0 && !self.alignment.len().is_multiple_of(blocks) {
            return Err(Error::InvalidInput("last step has missing block records".into()));
        }
        Ok(())
    }

    pub fn final_losses(&self) -> Option<LossRecord> {
        self.losses.last().copied()
    }
}

/// Fraction of steps with at least one activated block (temporal) and of
/// blocks activated at least once (spatial).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub temporal: f64,
    pub spatial: f64,
}

pub fn sparsity_stats(t: &RunTelemetry) -> Result<SparsityStats> {
    if t.alignment.is_empty() {
        return Err(Error::InvalidInput("telemetry has no alignment records".into()));
    }
    let steps: BTreeSet<usize> = t.alignment.iter().map(|r| r.step).collect();
    let blocks: BTreeSet<usize> = t.alignment.iter().map(|r| r.block_index).collect();
    let active = t.activations();
    let active_steps: BTreeSet<usize> = active.iter().map(|&(s, _)| s).collect();
    let active_blocks: BTreeSet<usize> = active.iter().map(|&(_, b)| b).collect();
    Ok(SparsityStats {
        temporal: active_steps.len() as f64 / steps.len() as f64,
        spatial: active_blocks.len() as f64 / blocks.len() as f64,
    })
}

/// Counts of records with `τ < threshold`, marginalized over blocks
/// (`per_step`) and over steps (`per_block`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictMargins {
    pub per_step: Vec<usize>,
    pub per_block: Vec<usize>,
}

pub fn conflict_count_margins(t: &RunTelemetry, threshold: f64) -> ConflictMargins {
    let steps = t.alignment.iter().map(|r| r.step + 1).max().unwrap_or(0);
    let blocks = t.alignment.iter().map(|r| r.block_index + 1).max().unwrap_or(0);
    let mut margins = ConflictMargins {
        per_step: vec![0; steps],
        per_block: vec![0; blocks],
    };
    for r in t.alignment.iter().filter(|r| r.tau < threshold) {
        margins.per_step[r.step] += 1;
        margins.per_block[r.block_index] += 1;
    }
    margins
}

/// Effective rank of a momentum at energy `alpha`; zero momentum gives
/// `(0, true)`.
pub fn momentum_rank(m: &Matrix, alpha: f64) -> Result<(usize, bool)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if m.is_zero() {
        return Ok((0, true));
    }
    let svd = compact_svd(m, DEFAULT_RANK_TOL)?;
    Ok((EnergyProfile::from_sigma(&svd.sigma)?.effective_rank(alpha)?, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTrace {
    pub entries: Vec<RankRecord>,
    /// Per-block mean of `effective_rank` over all steps.
    pub averages: Vec<f64>,
}

/// Effective ranks of `momenta[step][block]` at energy `alpha`.
pub fn rank_trace(momenta: &[Vec<Matrix>], alpha: f64) -> Result<RankTrace> {
    let mut entries = Vec::new();
    for (step, blocks) in momenta.iter().enumerate() {
        for (block_index, m) in blocks.iter().enumerate() {
            let (effective_rank, zero_momentum) = momentum_rank(m, alpha)?;
            entries.push(RankRecord {
                step,
                block_index,
                alpha,
                effective_rank,
                zero_momentum,
            });
        }
    }
    let averages = rank_averages(&entries);
    Ok(RankTrace { entries, averages })
}

pub fn rank_averages(entries: &[RankRecord]) -> Vec<f64> {
    let blocks = entries.iter().map(|r| r.block_index + 1).max().unwrap_or(0);
    let mut sums = vec![0.0; blocks];
    let mut counts = vec![0usize; blocks];
    for r in entries {
        sums[r.block_index] += r.effective_rank as f64;
        counts[r.block_index] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Csv,
    Json,
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        })
    }
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            _ => Err(Error::InvalidInput(format!(
                "unknown format {s:?} (expected csv or json)"
            ))),
        }
    }
}

/// Side data of a CSV export that has no tabular home.
#[derive(Serialize, Deserialize)]
struct CsvMeta {
    config: Value,
    /// `"omitted"` (no trace), `"empty"` or the rank file name.
    rank_trace: String,
}

/// Writes `t` into directory `dir` and returns the files written.
///
/// CSV: `alignment.csv` (`step,block_index,block_name,tau,activated`),
/// `losses.csv` (`step,f_loss,g_loss`), `sparsity.csv` (`temporal,spatial`),
/// `rank_trace.csv` (`step,block_index,alpha,effective_rank,zero_momentum`,
/// only when a nonempty trace exists) and `telemetry_meta.json` holding the
/// config. JSON: a single `telemetry.json` with keys `alignment`, `losses`,
/// `sparsity`, `rank_trace` and `config`. Floats use the shortest decimal
/// form that parses back to the same value.
pub fn export(t: &RunTelemetry, dir: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sparsity = sparsity_stats(t).ok();
    match format {
        ExportFormat::Json => {
            let path = dir.join(JSON_FILE);
            let doc = json!({
                "alignment": t.alignment,
                "losses": t.losses,
                "sparsity": sparsity,
                "rank_trace": t.rank_trace,
                "config": t.config,
            });
            let text = serde_json::to_string_pretty(&doc)
                .map_err(|e| Error::format(&path, e.to_string()))?;
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(vec![path])
        }
        ExportFormat::Csv => {
            let mut written = vec![
                write_csv(&dir.join(ALIGNMENT_FILE), &t.alignment, &["step", "block_index", "block_name", "tau", "activated"])?,
                write_csv(&dir.join(LOSSES_FILE), &t.losses, &["step", "f_loss", "g_loss"])?,
                write_csv(&dir.join(SPARSITY_FILE), sparsity.as_slice(), &["temporal", "spatial"])?,
            ];
            let rank_note = match &t.rank_trace {
                None => "omitted".to_string(),
                Some(trace) if trace.is_empty() => "empty".to_string(),
                Some(trace) => {
                    written.push(write_csv(
                        &dir.join(RANK_FILE),
                        trace,
                        &["step", "block_index", "alpha", "effective_rank", "zero_momentum"],
                    )?);
                    RANK_FILE.to_string()
                }
            };
            let path = dir.join(META_FILE);
            let meta = CsvMeta {
                config: t.config.clone(),
                rank_trace: rank_note,
            };
            let text = serde_json::to_string_pretty(&meta)
                .map_err(|e| Error::format(&path, e.to_string()))?;
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            written.push(path);
            Ok(written)
        }
    }
}

/// Reads back what [`export`] wrote.
pub fn import(dir: &Path, format: ExportFormat) -> Result<RunTelemetry> {
    match format {
        ExportFormat::Json => {
            #[derive(Deserialize)]
            struct Doc {
                alignment: Vec<AlignmentRecord>,
                losses: Vec<LossRecord>,
                rank_trace: Option<Vec<RankRecord>>,
                config: Value,
            }
            let path = dir.join(JSON_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let doc: Doc =
                serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
            Ok(RunTelemetry {
                alignment: doc.alignment,
                losses: doc.losses,
                rank_trace: doc.rank_trace,
                config: doc.config,
            })
        }
        ExportFormat::Csv => {
            let path = dir.join(META_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let meta: CsvMeta =
                serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
            let rank_trace = match meta.rank_trace.as_str() {
                "omitted" => None,
                "empty" => Some(Vec::new()),
                file => Some(read_csv(&dir.join(file))?),
            };
            Ok(RunTelemetry {
                alignment: read_csv(&dir.join(ALIGNMENT_FILE))?,
                losses: read_csv(&dir.join(LOSSES_FILE))?,
                rank_trace,
                config: meta.config,
            })
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<PathBuf> {
    let fail = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(fail)?;
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.serialize(row).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let fail = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    };
    let mut r = csv::Reader::from_path(path).map_err(fail)?;
    r.deserialize().map(|row| row.map_err(fail)).collect()
}
