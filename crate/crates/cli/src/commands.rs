//! The four subcommands. Each returns the paths it wrote (or prints to stdout
//! when no output directory is given).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sift_core::archive::{read_archive, write_archive};
use sift_core::merge::{
    apply_task_vector, compute_task_vector, direct_merge, interference_free_merge,
    singular_interference, BlockMergeReport,
};
use sift_core::optim::train;
use sift_core::telemetry::{self, momentum_rank, sparsity_stats, ExportFormat, JSON_FILE};
use sift_core::testbed::{direction_probe, ProbeDirection};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MODEL_DIR: &str = "model";
pub const TELEMETRY_DIR: &str = "telemetry";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MERGED_DIR: &str = "merged";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

/// Writes `rows` as CSV (header from the field names) or a JSON array.
fn write_rows<T: Serialize>(out: &mut dyn Write, rows: &[T], format: ExportFormat) -> std::io::Result<()> {
    match format {
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r).map_err(std::io::Error::other)?;
            }
            w.flush()
        }
        ExportFormat::Json => {
            serde_json::to_writer_pretty(&mut *out, rows).map_err(std::io::Error::other)?;
            writeln!(out)
        }
    }
}

/// Writes `rows` to `dir/stem.{csv,json}`, or to stdout when `dir` is `None`.
fn emit_rows<T: Serialize>(dir: Option<&Path>, stem: &str, rows: &[T], format: ExportFormat) -> Result<Option<PathBuf>> {
    match dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let path = dir.join(format!("{stem}.{format}"));
            let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            write_rows(&mut file, rows, format).map_err(|e| io_err(&path, e))?;
            Ok(Some(path))
        }
        None => {
            let stdout = std::io::stdout();
            write_rows(&mut stdout.lock(), rows, format).map_err(|e| CliError::Usage(format!("stdout: {e}")))?;
            Ok(None)
        }
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable JSON value");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn validate(config: &RunConfig) -> Result<()> {
    config
        .optimizer
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid optimizer config: {e}")))
}

/// Trains, then writes `model/` (archive), `telemetry/` and `summary.json`
/// under `out`. Returns the summary.
pub fn run(config: &RunConfig, out: &Path, format: ExportFormat) -> Result<Value> {
    validate(config)?;
    let pair = config.task.build(config.seed)?;
    let (state, mut tele) = train(
        pair.initial_state().clone(),
        &pair,
        &config.optimizer,
        config.steps,
        config.method,
    )?;
    let resolved = serde_json::to_value(config).expect("serializable config");
    tele.config = resolved.clone();

    let model_dir = out.join(MODEL_DIR);
    let tele_dir = out.join(TELEMETRY_DIR);
    write_archive(&state, &model_dir)?;
    let written = telemetry::export(&tele, &tele_dir, format)?;

    let last = tele.final_losses().expect("initial loss is always recorded");
    let sparsity = sparsity_stats(&tele).ok();
    let rank_means = tele
        .rank_trace
        .as_deref()
        .filter(|r| !r.is_empty())
        .map(telemetry::rank_averages);
    let summary = json!({
        "command": "run",
        "task": pair.name,
        "results": {
            "steps": config.steps,
            "final_f_loss": last.f_loss,
            "final_g_loss": last.g_loss,
            "activations": tele.activations().len(),
            "sparsity": sparsity,
            "mean_effective_rank": rank_means,
        },
        "files": {
            "model": model_dir,
            "telemetry": written,
        },
        "config": resolved,
    });
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MergeMode {
    Direct,
    Whitened,
}

#[derive(Serialize)]
struct InterferenceRow {
    block: String,
    interference_before: f64,
    interference_after: f64,
    fallback: bool,
    warning: Option<String>,
}

impl From<BlockMergeReport> for InterferenceRow {
    fn from(r: BlockMergeReport) -> Self {
        Self {
            block: r.name,
            interference_before: r.interference_before,
            interference_after: r.interference_after,
            fallback: r.fallback,
            warning: r.warning,
        }
    }
}

/// Merges the task vectors of `ft_f` and `ft_g` relative to `base` and writes
/// `merged/` plus `interference.{csv,json}` under `out`. Returns the rows'
/// warnings so the caller can surface them.
pub fn merge(
    base: &Path,
    ft_f: &Path,
    ft_g: &Path,
    mode: MergeMode,
    out: &Path,
    format: ExportFormat,
) -> Result<Vec<String>> {
    let base_state = read_archive(base)?;
    let f_state = read_archive(ft_f)?;
    let g_state = read_archive(ft_g)?;
    let mut bad = Vec::new();
    for (label, s) in [("ft_f", &f_state), ("ft_g", &g_state)] {
        for b in base_state.layout_mismatches(s) {
            bad.push(format!("{label}: {b}"));
        }
    }
    if !bad.is_empty() {
        return Err(CliError::Usage(format!(
            "archive layouts differ from base: {}",
            bad.join("; ")
        )));
    }
    let df = compute_task_vector(&base_state, &f_state)?;
    let dg = compute_task_vector(&base_state, &g_state)?;
    let (merged, rows): (_, Vec<InterferenceRow>) = match mode {
        MergeMode::Direct => {
            let rows = singular_interference(&df, &dg)?
                .into_iter()
                .map(|b| InterferenceRow {
                    block: b.name,
                    interference_before: b.value,
                    interference_after: b.value,
                    fallback: false,
                    warning: b.zero_delta.then(|| "a task delta is zero".into()),
                })
                .collect();
            (direct_merge(&df, &dg)?, rows)
        }
        MergeMode::Whitened => {
            let outcome = interference_free_merge(&df, &dg)?;
            (outcome.merged, outcome.reports.into_iter().map(Into::into).collect())
        }
    };
    let state = apply_task_vector(&base_state, &merged)?;
    write_archive(&state, &out.join(MERGED_DIR))?;
    emit_rows(Some(out), "interference", &rows, format)?;
    Ok(rows
        .iter()
        .filter_map(|r| r.warning.as_ref().map(|w| format!("block {}: {w}", r.block)))
        .collect())
}

/// Loss curves of `f` along each probe direction from the task's initial
/// state. Row `t` holds `f` after `t` steps (row 0 is the starting loss).
pub fn probe(
    config: &RunConfig,
    directions: &[ProbeDirection],
    out: Option<&Path>,
    format: ExportFormat,
) -> Result<Option<PathBuf>> {
    if directions.is_empty() {
        return Err(CliError::Usage("no probe directions given".into()));
    }
    let pair = config.task.build(config.seed)?;
    let settings = &config.probe;
    let curves = directions
        .iter()
        .map(|&d| direction_probe(pair.initial_state(), &pair, d, settings.eta, settings.steps))
        .collect::<sift_core::Result<Vec<_>>>()?;
    let rows: Vec<BTreeMap<String, Value>> = (0..=settings.steps)
        .map(|t| {
            let mut row = BTreeMap::new();
            row.insert("step".to_string(), json!(t));
            for (d, c) in directions.iter().zip(&curves) {
                row.insert(d.name().to_string(), json!(c[t]));
            }
            row
        })
        .collect();
    match format {
        ExportFormat::Json => emit_rows(out, "probe", &rows, format),
        // BTreeMap rows would reorder the columns; write them explicitly.
        ExportFormat::Csv => {
            let mut buf = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                let mut header = vec!["step".to_string()];
                header.extend(directions.iter().map(|d| d.name().to_string()));
                w.write_record(&header).expect("in-memory write");
                for t in 0..=settings.steps {
                    let mut rec = vec![t.to_string()];
                    // Debug formatting is the shortest round-trip form.
                    rec.extend(curves.iter().map(|c| format!("{:?}", c[t])));
                    w.write_record(&rec).expect("in-memory write");
                }
                w.flush().expect("in-memory write");
            }
            match out {
                Some(dir) => {
                    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                    let path = dir.join("probe.csv");
                    fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
                    Ok(Some(path))
                }
                None => {
                    std::io::stdout()
                        .write_all(&buf)
                        .map_err(|e| CliError::Usage(format!("stdout: {e}")))?;
                    Ok(None)
                }
            }
        }
    }
}

#[derive(Serialize)]
struct WeightRankRow {
    block_index: usize,
    block: String,
    rows: usize,
    cols: usize,
    alpha: f64,
    effective_rank: usize,
    zero: bool,
}

#[derive(Serialize)]
struct MomentumRankRow {
    block_index: usize,
    block: String,
    alpha: f64,
    mean_effective_rank: f64,
    steps: usize,
}

pub enum RankSource<'a> {
    Archive(&'a Path),
    Telemetry(&'a Path),
}

fn sorted_alphas(alphas: &[f64]) -> Result<Vec<f64>> {
    let mut out = alphas.to_vec();
    if let Some(a) = out.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
        return Err(CliError::Usage(format!("alpha must lie in (0, 1], got {a}")));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

/// Effective ranks per block, alphas ascending.
///
/// For an archive these are the ranks of the weight matrices at each alpha.
/// For a run's telemetry directory they are the per-block means of the
/// recorded momentum rank trace; only the alpha(s) used during the run are
/// available there.
pub fn rank(source: RankSource<'_>, alphas: &[f64], out: Option<&Path>, format: ExportFormat) -> Result<Option<PathBuf>> {
    let alphas = sorted_alphas(alphas)?;
    match source {
        RankSource::Archive(dir) => {
            if alphas.is_empty() {
                return Err(CliError::Usage("rank of an archive needs at least one --alpha".into()));
            }
            let state = read_archive(dir)?;
            let mut rows = Vec::new();
            for &alpha in &alphas {
                for (i, block) in state.blocks().iter().enumerate() {
                    let (effective_rank, zero) = momentum_rank(&block.matrix, alpha)?;
                    rows.push(WeightRankRow {
                        block_index: i,
                        block: block.name.clone(),
                        rows: block.matrix.rows(),
                        cols: block.matrix.cols(),
                        alpha,
                        effective_rank,
                        zero,
                    });
                }
            }
            emit_rows(out, "rank", &rows, format)
        }
        RankSource::Telemetry(dir) => {
            let fmt = if dir.join(JSON_FILE).exists() {
                ExportFormat::Json
            } else {
                ExportFormat::Csv
            };
            let t = telemetry::import(dir, fmt)?;
            let trace = t.rank_trace.unwrap_or_default();
            if trace.is_empty() {
                return Err(CliError::Usage(format!(
                    "{} holds no rank trace (run with optimizer.rank_alpha set)",
                    dir.display()
                )));
            }
            let names: BTreeMap<usize, String> = t
                .alignment
                .iter()
                .map(|r| (r.block_index, r.block_name.clone()))
                .collect();
            let mut recorded: Vec<f64> = trace.iter().map(|r| r.alpha).collect();
            recorded.sort_by(f64::total_cmp);
            recorded.dedup();
            let wanted = if alphas.is_empty() { recorded.clone() } else { alphas };
            let mut rows = Vec::new();
            for alpha in wanted {
                if !recorded.contains(&alpha) {
                    return Err(CliError::Usage(format!(
                        "alpha {alpha} was not recorded; the trace holds {recorded:?}"
                    )));
                }
                let subset: Vec<_> = trace.iter().filter(|r| r.alpha == alpha).copied().collect();
                let means = telemetry::rank_averages(&subset);
                for (block_index, mean) in means.into_iter().enumerate() {
                    rows.push(MomentumRankRow {
                        block_index,
                        block: names.get(&block_index).cloned().unwrap_or_default(),
                        alpha,
                        mean_effective_rank: mean,
                        steps: subset.iter().filter(|r| r.block_index == block_index).count(),
                    });
                }
            }
            emit_rows(out, "rank", &rows, format)
        }
    }
}
