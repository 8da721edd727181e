//! Run configuration: a TOML file plus `KEY=VALUE` overrides.
//!
//! ```toml
//! method = "sift"          # sift | muon | adamw | projection
//! steps = 100
//! seed = 0
//! out = "runs/demo"        # optional; --out wins
//! format = "csv"           # optional; --format wins
//!
//! [task]
//! generator = "localized_conflict"
//! layers = 6
//! window = [10, 20]
//! block = 2
//!
//! [optimizer]
//! k = "full"               # or an integer
//! epsilon = -0.1
//! eta = 0.02               # or { initial = 0.1, factor = 0.5, every = 20 }
//!
//! [probe]
//! eta = 0.05
//! steps = 30
//! directions = ["full", "projected", "removed"]
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sift_core::telemetry::ExportFormat;
use sift_core::testbed::{
    make_conflicting_quadratics, make_orthogonal_quadratics, LocalizedConflictTask,
    ProbeDirection, TwoLayerLinearTask,
};
use sift_core::{Method, ObjectivePair, OptimizerConfig};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub steps: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Option<ExportFormat>,
    pub task: TaskSpec,
    pub optimizer: OptimizerConfig,
    pub probe: ProbeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Sift,
            steps: 100,
            seed: 0,
            out: None,
            format: None,
            task: TaskSpec::default(),
            optimizer: OptimizerConfig::default(),
            probe: ProbeSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub eta: f64,
    pub steps: usize,
    pub directions: Vec<ProbeDirection>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            eta: 0.05,
            steps: 30,
            directions: ProbeDirection::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum TaskSpec {
    LocalizedConflict(LocalizedSpec),
    ConflictingQuadratics(QuadraticSpec),
    OrthogonalQuadratics(OrthogonalSpec),
    TwoLayerLinear(TwoLayerSpec),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::LocalizedConflict(LocalizedSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizedSpec {
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    /// Inclusive step window.
    pub window: (usize, usize),
    pub block: usize,
    pub conflict_strength: f64,
}

impl Default for LocalizedSpec {
    fn default() -> Self {
        let t = LocalizedConflictTask::new(6, (10, 20), 2, 0);
        Self {
            layers: t.layers,
            rows: t.rows,
            cols: t.cols,
            window: t.window,
            block: t.block,
            conflict_strength: t.conflict_strength,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticSpec {
    pub n: usize,
    pub p: usize,
    pub overlap: f64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        Self { n: 8, p: 6, overlap: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthogonalSpec {
    pub n: usize,
    pub p: usize,
}

impl Default for OrthogonalSpec {
    fn default() -> Self {
        Self { n: 8, p: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoLayerSpec {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Defaults to `4 · d_in`.
    pub samples: Option<usize>,
    pub identical_targets: bool,
}

impl Default for TwoLayerSpec {
    fn default() -> Self {
        Self {
            d_in: 8,
            d_hidden: 4,
            d_out: 6,
            samples: None,
            identical_targets: false,
        }
    }
}

impl TaskSpec {
    pub fn build(&self, seed: u64) -> sift_core::Result<ObjectivePair> {
        match self {
            TaskSpec::LocalizedConflict(s) => LocalizedConflictTask {
                layers: s.layers,
                rows: s.rows,
                cols: s.cols,
                window: s.window,
                block: s.block,
                conflict_strength: s.conflict_strength,
                seed,
            }
            .build(),
            TaskSpec::ConflictingQuadratics(s) => make_conflicting_quadratics(s.n, s.p, s.overlap, seed),
            TaskSpec::OrthogonalQuadratics(s) => make_orthogonal_quadratics(s.n, s.p, seed),
            TaskSpec::TwoLayerLinear(s) => {
                let mut t = TwoLayerLinearTask::new(s.d_in, s.d_hidden, s.d_out, seed);
                if let Some(n) = s.samples {
                    t.samples = n;
                }
                t.identical_targets = s.identical_targets;
                t.build()
            }
        }
    }
}

/// Reads `path`, applies `overrides` (`KEY=VALUE`, dotted keys address nested
/// tables) and parses the result strictly.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let fail = |message: String| CliError::Config {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    // Parsing the file on its own first gives line/column diagnostics.
    let from_file: RunConfig = toml::from_str(&text).map_err(|e| fail(e.to_string()))?;
    if overrides.is_empty() {
        return Ok(from_file);
    }
    let mut table: Table = toml::from_str(&text).map_err(|e| fail(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    RunConfig::deserialize(Value::Table(table))
        .map_err(|e| fail(format!("after overrides {overrides:?}: {e}")))
}

/// Sets `KEY=VALUE` in `table`. The value is read as a TOML value when it
/// parses as one (`0.5`, `true`, `[10, 20]`, `{ initial = 1.0, ... }`) and as
/// a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let usage = |msg: String| CliError::Usage(format!("--override {assignment:?}: {msg}"));
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage("expected KEY=VALUE".into()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(usage("empty key segment".into()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("nonempty path");
    let mut node = table;
    for (depth, p) in parents.iter().enumerate() {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(usage(format!(
                    "{} is not a table",
                    path[..=depth].join(".")
                )))
            }
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> std::result::Result<RunConfig, toml::de::Error> {
        toml::from_str(text)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.optimizer.epsilon, -0.1);
        assert_eq!(c.optimizer.beta, 0.95);
        assert_eq!(c.optimizer.ns_iterations, 5);
        assert_eq!(c.optimizer.lambda, 1.0);
    }

    #[test]
    fn task_tables_are_tagged_and_strict() {
        let c = parse("[task]\ngenerator = \"conflicting_quadratics\"\noverlap = 0.5\n").unwrap();
        assert_eq!(
            c.task,
            TaskSpec::ConflictingQuadratics(QuadraticSpec { overlap: 0.5, ..Default::default() })
        );
        assert!(parse("[task]\ngenerator = \"localized_conflict\"\noverlap = 0.5\n").is_err());
        assert!(parse("[task]\ngenerator = \"nope\"\n").is_err());
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let err = parse("steps = 3\n\n[optimizer]\nbetta = 0.9\n").unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        assert!(err.contains("betta"), "{err}");
    }

    #[test]
    fn overrides_parse_values_and_create_tables() {
        let mut t = Table::new();
        apply_override(&mut t, "optimizer.eta=0.5").unwrap();
        apply_override(&mut t, "method=muon").unwrap();
        apply_override(&mut t, "task.generator = orthogonal_quadratics").unwrap();
        apply_override(&mut t, "task.n=[3]").unwrap();
        assert_eq!(t["optimizer"]["eta"], Value::Float(0.5));
        assert_eq!(t["method"], Value::String("muon".into()));
        assert_eq!(t["task"]["n"], Value::Array(vec![Value::Integer(3)]));

        assert!(apply_override(&mut t, "noequals").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        assert!(apply_override(&mut t, "method.x=1").is_err());
    }
}
