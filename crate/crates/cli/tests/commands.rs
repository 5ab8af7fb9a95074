//! End-to-end runs of the binary: outputs, determinism and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use icl_ts_lab::io::{read_csv, read_json, DatasetManifest, MANIFEST, SCHEMA_LINE};
use serde_json::Value;
use tempfile::TempDir;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-ts-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn dir_str(d: &Path) -> &str {
    d.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--n", "4", "--T", "500", "--seed", "7", "--out", dir_str(d)]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
    let first = String::from_utf8(fa[0].1.clone()).unwrap();
    assert!(first.starts_with(SCHEMA_LINE) || first.contains("\"schema\": 1"));
}

#[test]
fn gen_respects_the_requested_ranges() {
    let tmp = TempDir::new().unwrap();
    let out = ok(&["gen", "--n", "12", "--T", "64", "--d", "4,5", "--q", "4,5", "--out", dir_str(tmp.path())]);
    assert_eq!(stdout_json(&out)["n"], 12);
    let m: DatasetManifest = read_json(tmp.path().join(MANIFEST)).unwrap();
    assert_eq!(m.series.len(), 12);
    for e in &m.series {
        assert!((4..=5).contains(&e.d) && (4..=5).contains(&e.q), "{e:?}");
        assert!((0.1..=1.0).contains(&e.sigma2));
    }
}

#[test]
fn gen_rejects_zero_lag_order() {
    let tmp = TempDir::new().unwrap();
    let out = lab(&["gen", "--n", "2", "--q", "0", "--out", dir_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive"));
}

#[test]
fn verify_passes_by_default_and_with_split_heads() {
    let tmp = TempDir::new().unwrap();
    let out = ok(&["verify", "--out", dir_str(tmp.path())]);
    let report = stdout_json(&out);
    assert_eq!(report["pass"], true);
    for c in report["checks"].as_array().unwrap() {
        assert!(c["max_deviation"].as_f64().unwrap() <= c["tolerance"].as_f64().unwrap());
    }
    assert!(tmp.path().join("verify.json").exists());
    let out = ok(&["verify", "--split-heads", "2", "--gd-instances", "10", "--out", dir_str(tmp.path())]);
    assert_eq!(stdout_json(&out)["pass"], true);
}

#[test]
fn tampered_cross_block_bias_fails_isolation() {
    let tmp = TempDir::new().unwrap();
    let out = lab(&["verify", "--tamper", "u2", "--out", dir_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("block-isolation"));
    let report = stdout_json(&out);
    let iso = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "block-isolation")
        .unwrap();
    assert_eq!(iso["pass"], false);
}

fn sweep_rows(dir: &Path) -> Vec<Vec<String>> {
    let (header, rows) = read_csv(dir.join("sweep.csv")).unwrap();
    assert_eq!(header, ["method", "d", "q", "lookback", "seed", "mse", "raw_mse", "error"]);
    rows
}

#[test]
fn sweep_writes_one_sorted_row_per_cell() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "sweep",
        "--lookbacks",
        "8,16,32,64",
        "--methods",
        "constructed-icl,ls-gd-100,ls-closed",
        "--seeds",
        "2",
        "--positions",
        "3",
        "--q",
        "2",
    ];
    let a = tmp.path().join("a");
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--out", dir_str(&a)]);
    ok(&full);
    let rows = sweep_rows(&a);
    assert_eq!(rows.len(), 4 * 3 * 2);
    assert!(rows.iter().all(|r| r[7].is_empty()), "{rows:?}");
    let mse = |method: &str, lb: &str, seed: &str| -> f64 {
        rows.iter()
            .find(|r| r[0] == method && r[3] == lb && r[4] == seed)
            .unwrap()[5]
            .parse()
            .unwrap()
    };
    for lb in ["8", "16", "32", "64"] {
        for seed in ["0", "1"] {
            let (c, g) = (mse("constructed-icl", lb, seed), mse("ls-gd-100", lb, seed));
            assert!((c - g).abs() <= 1e-6 * g, "lookback {lb}: {c} vs {g}");
        }
    }
    let b = tmp.path().join("b");
    let mut again: Vec<&str> = args.to_vec();
    again.extend(["--out", dir_str(&b)]);
    ok(&again);
    assert_eq!(fs::read(a.join("sweep.csv")).unwrap(), fs::read(b.join("sweep.csv")).unwrap());
}

#[test]
fn sweep_rejects_a_decreasing_grid() {
    let tmp = TempDir::new().unwrap();
    let out = lab(&["sweep", "--lookbacks", "32,16", "--out", dir_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bounds_compare_sample_counts_and_report_ar1_clauses() {
    let tmp = TempDir::new().unwrap();
    let out = ok(&["bounds", "--n", "100", "--n", "400", "--ar1", "--out", dir_str(tmp.path())]);
    let r = stdout_json(&out);
    let ratio = r["n_ratios"][0]["ratio"].as_f64().unwrap();
    assert!((ratio - 0.5).abs() <= 1e-12, "{ratio}");
    let clauses = r["ar1"]["conditions"]["clauses"].as_array().unwrap();
    assert_eq!(clauses.len(), 3);
    // w = 0.5, σ = 1, B_x = B_w = 0.5: 0.25 < ln ½ + 1 ≈ 0.307 and |w| < 1.
    assert!(clauses.iter().all(|c| c["pass"] == true), "{clauses:?}");
    let out = ok(&["bounds", "--ar1-w", "1.2", "--ar1-b-x", "0.6", "--out", dir_str(tmp.path())]);
    let clauses = stdout_json(&out)["ar1"]["conditions"]["clauses"].clone();
    let pass: Vec<bool> = clauses
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["pass"].as_bool().unwrap())
        .collect();
    // 0.36 > 0.307, 0.3 < 0.307, 1.2 > 1.
    assert_eq!(pass, [false, true, false]);
}

#[test]
fn bounds_reject_alpha_at_one() {
    let tmp = TempDir::new().unwrap();
    let out = lab(&["bounds", "--alpha", "1.0", "--out", dir_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_history_has_one_row_per_step_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--n", "8", "--T", "40", "--d", "1,2", "--q", "1,2", "--seed", "3", "--out", dir_str(&data)]);
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        ok(&["train", "--data", dir_str(&data), "--steps", "200", "--batch", "4", "--seed", "5", "--out", dir_str(&out)]);
        outs.push(out);
    }
    let (header, rows) = read_csv(outs[0].join("history.csv")).unwrap();
    assert_eq!(header, ["step", "train_loss", "op_norm", "lr"]);
    assert_eq!(rows.len(), 200);
    for f in ["history.csv", "model.json"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_runs_on_unseen_dimensions() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    ok(&["gen", "--n", "4", "--T", "48", "--d", "4,5", "--q", "4,5", "--out", dir_str(&data)]);
    ok(&["train", "--data", dir_str(&data), "--steps", "10", "--batch", "4", "--out", dir_str(&model)]);
    let model_file = model.join("model.json");
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        ok(&[
            "eval",
            "--model",
            dir_str(&model_file),
            "--d",
            "2,10",
            "--q",
            "2",
            "--positions",
            "8",
            "--seed",
            "1",
            "--out",
            dir_str(&out),
        ]);
        outs.push(out);
    }
    let (header, rows) = read_csv(outs[0].join("eval.csv")).unwrap();
    assert_eq!(header, ["d", "q", "lookback", "mse", "error"]);
    assert_eq!(rows.len(), 2);
    let d2: f64 = rows[0][3].parse().unwrap();
    assert!(d2.is_finite() && rows[0][4].is_empty());
    // Ten variates exceed the model's five slots.
    assert_eq!(rows[1][3], "NaN");
    assert!(rows[1][4].contains("slots"));
    assert_eq!(fs::read(outs[0].join("eval.csv")).unwrap(), fs::read(outs[1].join("eval.csv")).unwrap());

    // A 64-step lookback does not fit the 32-row embedding: NaN row, exit 0.
    let sweep = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--methods",
        "trained-model",
        "--model",
        dir_str(&model_file),
        "--lookbacks",
        "8,16,64",
        "--q",
        "2",
        "--seeds",
        "1",
        "--positions",
        "4",
        "--out",
        dir_str(&sweep),
    ]);
    let rows = sweep_rows(&sweep);
    assert_eq!(rows.len(), 3);
    assert!(rows[..2].iter().all(|r| r[5].parse::<f64>().unwrap().is_finite()));
    assert_eq!(rows[2][5], "NaN");
    assert!(!rows[2][7].is_empty());
}
