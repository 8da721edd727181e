use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sift_cli::config::{QuadraticSpec, TaskSpec};
use sift_core::archive::{read_archive, write_archive};
use sift_core::{Matrix, ModelState};
use tempfile::TempDir;

fn sift(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sift"));
    cmd.args(args).env_remove(sift_cli::THREADS_ENV);
    if let Some(t) = threads {
        cmd.env(sift_cli::THREADS_ENV, t);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

const LOCALIZED: &str = "steps = 30\n[task]\ngenerator = \"localized_conflict\"\nwindow = [5, 10]\n";

#[test]
fn zero_steps_writes_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", LOCALIZED);
    let out = tmp.path().join("run");
    let o = sift(&["run", "--config", s(&cfg), "--out", s(&out), "--seed", "4", "--override", "steps=0"], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let expected = sift_cli::config::TaskSpec::default();
    let task = match expected {
        TaskSpec::LocalizedConflict(mut l) => {
            l.window = (5, 10);
            TaskSpec::LocalizedConflict(l)
        }
        _ => unreachable!(),
    };
    let pair = task.build(4).unwrap();
    assert_eq!(&read_archive(&out.join("model")).unwrap(), pair.initial_state());

    let (header, rows) = csv_rows(&out.join("telemetry/alignment.csv"));
    assert_eq!(header.join(","), "step,block_index,block_name,tau,activated");
    assert!(rows.is_empty());
    let sum = summary(&out);
    assert_eq!(sum["results"]["steps"], 0);
    assert!(sum["results"]["sparsity"].is_null());
    assert_eq!(sum["config"]["seed"], 4);
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", LOCALIZED);
    let mut payloads = Vec::new();
    for (i, threads) in [None, None, Some("1"), Some("3")].into_iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        let o = sift(&["run", "--config", s(&cfg), "--out", s(&out)], threads);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        payloads.push((
            fs::read(out.join("model/payload.bin")).unwrap(),
            fs::read(out.join("model/manifest.json")).unwrap(),
            fs::read(out.join("telemetry/alignment.csv")).unwrap(),
        ));
    }
    assert!(payloads.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", LOCALIZED);
    let out = tmp.path().join("run");
    let o = sift(&["run", "--config", s(&cfg), "--out", s(&out)], Some("zero"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("SIFT_OPT_THREADS"));
}

#[test]
fn sift_without_triggers_matches_muon_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "steps = 25\n[task]\ngenerator = \"orthogonal_quadratics\"\n[optimizer]\nepsilon = -1.0\n",
    );
    let mut results = Vec::new();
    for method in ["sift", "muon"] {
        let out = tmp.path().join(method);
        let o = sift(
            &["run", "--config", s(&cfg), "--out", s(&out), "--override", &format!("method={method}")],
            None,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        results.push((summary(&out)["results"].clone(), fs::read(out.join("model/payload.bin")).unwrap()));
    }
    assert_eq!(results[0], results[1]);
    assert_eq!(results[0].0["activations"], 0);
}

#[test]
fn json_export_has_the_documented_keys() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", LOCALIZED);
    let out = tmp.path().join("run");
    let o = sift(&["run", "--config", s(&cfg), "--out", s(&out), "--format", "json"], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join("telemetry/telemetry.json")).unwrap()).unwrap();
    for key in ["alignment", "losses", "sparsity", "rank_trace", "config"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    assert_eq!(doc["config"]["method"], "sift");
    assert_eq!(doc["losses"].as_array().unwrap().len(), 31);
}

#[test]
fn config_errors_exit_2_with_location() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let typo = write_config(tmp.path(), "typo.toml", "steps = 3\n\n[optimizer]\nbetta = 0.9\n");
    let o = sift(&["run", "--config", s(&typo), "--out", s(&out)], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4") && stderr(&o).contains("betta"), "{}", stderr(&o));
    assert!(!out.exists(), "nothing may run before the config is accepted");

    let good = write_config(tmp.path(), "good.toml", LOCALIZED);
    let o = sift(&["run", "--config", s(&good), "--out", s(&out), "--override", "optimizer.beta=1.5"], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));

    let o = sift(&["run", "--config", s(&good), "--out", s(&out), "--override", "task.windoww=[1,2]"], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("windoww"), "{}", stderr(&o));

    let o = sift(&["run", "--config", s(&good)], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("output directory"));

    assert_eq!(code(&sift(&["run", "--config", s(&tmp.path().join("missing.toml")), "--out", s(&out)], None)), 2);
    assert_eq!(code(&sift(&[], None)), 2);
    assert_eq!(code(&sift(&["frobnicate"], None)), 2);
    assert_eq!(code(&sift(&["--help"], None)), 0);
}

#[test]
fn divergence_exits_3_with_location() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", LOCALIZED);
    let out = tmp.path().join("run");
    let o = sift(&["run", "--config", s(&cfg), "--out", s(&out), "--override", "optimizer.eta=1e300"], None);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

fn state(blocks: Vec<(&str, Matrix)>) -> ModelState {
    ModelState::new(blocks.into_iter().map(|(n, m)| (n.to_string(), m)).collect()).unwrap()
}

fn archive(dir: &Path, name: &str, s: &ModelState) -> PathBuf {
    let path = dir.join(name);
    write_archive(s, &path).unwrap();
    path
}

fn interference(out: &Path) -> Vec<(String, f64, f64)> {
    let (header, rows) = csv_rows(&out.join("interference.csv"));
    assert_eq!(header.join(","), "block,interference_before,interference_after,fallback,warning");
    rows.into_iter()
        .map(|r| (r[0].clone(), r[1].parse().unwrap(), r[2].parse().unwrap()))
        .collect()
}

fn merge(base: &Path, f: &Path, g: &Path, mode: &str, out: &Path) -> Output {
    sift(&["merge", "--base", s(base), "--ft-f", s(f), "--ft-g", s(g), "--mode", mode, "--out", s(out)], None)
}

fn base_state() -> ModelState {
    state(vec![
        ("a", Matrix::from_fn(6, 5, |i, j| (i * 5 + j) as f64 * 0.1 - 1.0)),
        ("b", Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.25 })),
    ])
}

#[test]
fn merging_identical_archives_returns_the_base() {
    let tmp = TempDir::new().unwrap();
    let base = archive(tmp.path(), "base", &base_state());
    for mode in ["direct", "whitened"] {
        let out = tmp.path().join(mode);
        let o = merge(&base, &base, &base, mode, &out);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(read_archive(&out.join("merged")).unwrap(), base_state());
        assert!(interference(&out).iter().all(|(_, before, after)| *before == 0.0 && *after == 0.0));
    }
}

#[test]
fn whitened_merge_clears_interference() {
    let tmp = TempDir::new().unwrap();
    let b = base_state();
    let bump = |seed: f64, rank: usize| {
        let mut s = b.clone();
        for l in 0..s.len() {
            let m = s.block(l);
            let (r, c) = m.shape();
            let delta = Matrix::from_fn(r, c, |i, j| {
                (0..rank).map(|k| ((i + 1) as f64 * (seed + k as f64)).sin() * ((j + 2) as f64 * (seed - k as f64)).cos()).sum()
            });
            s.set_block(l, m + &delta).unwrap();
        }
        s
    };
    let base = archive(tmp.path(), "base", &b);
    let f = archive(tmp.path(), "f", &bump(0.7, 2));
    let g = archive(tmp.path(), "g", &bump(1.9, 1));
    let out = tmp.path().join("w");
    let o = merge(&base, &f, &g, "whitened", &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = interference(&out);
    assert_eq!(rows.len(), 2);
    for (name, before, after) in rows {
        assert!(before > 1e-3, "{name}: fixture should interfere ({before})");
        assert!(after <= 1e-8, "{name}: {after}");
    }
}

#[test]
fn orthogonal_fixtures_merge_identically() {
    let tmp = TempDir::new().unwrap();
    let b = base_state();
    let mut f = b.clone();
    let mut g = b.clone();
    let delta = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, r: usize, c: usize| {
        Matrix::from_fn(r, c, |i, j| {
            if rows.contains(&i) && cols.contains(&j) {
                1.0 + (i * c + j) as f64 * 0.37
            } else {
                0.0
            }
        })
    };
    for l in 0..b.len() {
        let (r, c) = b.block(l).shape();
        f.set_block(l, b.block(l) + &delta(0..2, 0..2, r, c)).unwrap();
        g.set_block(l, b.block(l) + &delta(2..4, 2..4, r, c)).unwrap();
    }
    let (base, fa, ga) = (
        archive(tmp.path(), "base", &b),
        archive(tmp.path(), "f", &f),
        archive(tmp.path(), "g", &g),
    );
    let (d, w) = (tmp.path().join("d"), tmp.path().join("w"));
    assert_eq!(code(&merge(&base, &fa, &ga, "direct", &d)), 0);
    assert_eq!(code(&merge(&base, &fa, &ga, "whitened", &w)), 0);
    let (md, mw) = (read_archive(&d.join("merged")).unwrap(), read_archive(&w.join("merged")).unwrap());
    for (x, y) in md.matrices().zip(mw.matrices()) {
        assert!(x.max_abs_diff(y) <= 1e-8);
    }
}

#[test]
fn layout_mismatch_lists_the_blocks() {
    let tmp = TempDir::new().unwrap();
    let base = archive(tmp.path(), "base", &base_state());
    let mut other = base_state();
    other = state(vec![("a", other.block(0).clone()), ("b", Matrix::zeros(4, 3))]);
    let bad = archive(tmp.path(), "bad", &other);
    let o = merge(&base, &bad, &base, "whitened", &tmp.path().join("out"));
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("b (4x4 vs 4x3)") && !err.contains("a ("), "{err}");
}

fn probe_csv(tmp: &TempDir, task: &str, extra: &[&str]) -> (Vec<String>, Vec<Vec<f64>>) {
    let cfg = write_config(tmp.path(), "p.toml", &format!("[task]\n{task}\n[probe]\neta = 0.05\nsteps = 15\n"));
    let out = tmp.path().join("probe");
    let mut args = vec!["probe", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = sift(&args, None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("probe.csv"));
    let rows = rows.into_iter().map(|r| r.iter().map(|x| x.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn probe_on_orthogonal_task() {
    let tmp = TempDir::new().unwrap();
    let (header, rows) = probe_csv(&tmp, "generator = \"orthogonal_quadratics\"", &[]);
    assert_eq!(header.join(","), "step,full,projected,removed");
    assert_eq!(rows.len(), 16);
    for (t, r) in rows.iter().enumerate() {
        assert_eq!(r[0], t as f64);
        assert!((r[1] - r[2]).abs() <= 1e-8);
        assert_eq!(r[3], rows[0][3]);
    }
}

#[test]
fn probe_on_overlapping_quadratics() {
    let tmp = TempDir::new().unwrap();
    let task = toml::to_string(&TaskSpec::ConflictingQuadratics(QuadraticSpec::default())).unwrap();
    let (header, rows) = probe_csv(&tmp, &task, &["--direction", "removed,full"]);
    assert_eq!(header.join(","), "step,removed,full");
    for t in 1..=10 {
        assert!(rows[t][1] < rows[t - 1][1], "removed not decreasing at {t}");
    }
}

#[test]
fn rank_of_identity_archive() {
    let tmp = TempDir::new().unwrap();
    let st = state(vec![
        ("eye6", Matrix::identity(6)),
        ("eye5", Matrix::identity(5)),
        ("r2", Matrix::from_fn(4, 3, |i, j| ((i + j) % 2) as f64 + f64::from(u8::from(i == 0 && j == 0)))),
    ]);
    let a = archive(tmp.path(), "a", &st);
    let out = tmp.path().join("rank");
    let o = sift(&["rank", "--archive", s(&a), "--alpha", "1.0", "--alpha", "0.5,0.2", "--out", s(&out)], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("rank.csv"));
    assert_eq!(header.join(","), "block_index,block,rows,cols,alpha,effective_rank,zero");
    let alphas: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(alphas.windows(2).all(|w| w[0] <= w[1]), "{alphas:?}");
    let get = |block: &str, alpha: f64| -> usize {
        rows.iter()
            .find(|r| r[1] == block && r[4].parse::<f64>().unwrap() == alpha)
            .map(|r| r[5].parse().unwrap())
            .unwrap()
    };
    assert_eq!(get("eye6", 0.5), 3);
    assert_eq!(get("eye5", 0.5), 3);
    assert_eq!(get("eye6", 1.0), 6);
    // Rows alternate between two patterns plus a bump: numerical rank 3.
    assert_eq!(get("r2", 1.0), 3);
}

#[test]
fn rank_of_run_telemetry() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", LOCALIZED);
    let plain = tmp.path().join("plain");
    assert_eq!(code(&sift(&["run", "--config", s(&cfg), "--out", s(&plain)], None)), 0);
    let o = sift(&["rank", "--telemetry", s(&plain.join("telemetry"))], None);
    assert_eq!(code(&o), 2, "a run without a rank trace is empty input");

    let traced = tmp.path().join("traced");
    let o = sift(
        &["run", "--config", s(&cfg), "--out", s(&traced), "--override", "optimizer.rank_alpha=0.9"],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sift(&["rank", "--telemetry", s(&traced.join("telemetry")), "--format", "json"], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[2]["block"], "layer2");
    assert_eq!(rows[2]["steps"], 30);
    let sum = summary(&traced);
    assert_eq!(sum["results"]["mean_effective_rank"][2], rows[2]["mean_effective_rank"]);

    let o = sift(&["rank", "--telemetry", s(&traced.join("telemetry")), "--alpha", "0.5"], None);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&sift(&["rank", "--archive", s(&traced.join("model")), "--alpha", "1.5"], None)), 2);
}
