//! End-to-end runs of the `obsfmm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn obsfmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obsfmm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = obsfmm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    obsfmm(dir, args).status.code().expect("exit code")
}

fn vector(path: PathBuf) -> Vec<f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.trim().parse().unwrap())
        .collect()
}

/// 12 × 12 grid with the standard spacing, FOAR R reconditioned and inverted.
fn pipeline(tmp: &TempDir) {
    let d = tmp.path();
    ok(d, &["grid", "--lat-count", "12", "--lon-count", "12", "--lat-range", "54", "55.41", "--lon-range", "-6", "-4.14", "--out", "obs.csv"]);
    ok(d, &["build-cov", "--obs", "obs.csv", "--kind", "foar", "--lengthscale", "80", "--out", "r.bin"]);
    ok(d, &["recondition", "--input", "r.bin", "--method", "rr", "--kappa", "1000", "--out", "rr.bin"]);
    ok(d, &["invert", "--input", "rr.bin", "--out", "a.bin"]);
}

#[test]
fn grid_writes_header_and_points() {
    let tmp = TempDir::new().unwrap();
    let text = ok(tmp.path(), &["grid", "--lat-count", "2", "--lon-count", "3", "--lat-range", "50", "51", "--lon-range", "-1", "1"]);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "lat,lon");
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[1], "50.0,-1.0");
    assert_eq!(lines[6], "51.0,1.0");
}

#[test]
fn full_rank_plan_reproduces_dense_product() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    pipeline(&tmp);
    // 144 points over 16 leaves: rank 144 never clips anything away.
    ok(d, &["plan", "--matrix", "a.bin", "--obs", "obs.csv", "--rank", "144", "--out", "plan.bin"]);
    ok(d, &["sample-departures", "--cov", "rr.bin", "--obs", "obs.csv", "--out", "d.csv"]);
    let out = obsfmm(d, &["apply", "--plan", "plan.bin", "--vector", "d.csv", "--check", "a.bin", "--out", "q.csv"]);
    assert!(out.status.success());
    let note = String::from_utf8(out.stderr).unwrap();
    let logged: f64 = note
        .trim()
        .strip_prefix("log10(RMSE) = ")
        .map(|v| v.parse().unwrap())
        .unwrap_or(f64::NEG_INFINITY);
    assert!(logged < -10.0, "{note}");
    assert_eq!(vector(d.join("q.csv")).len(), 144);
}

#[test]
fn departures_depend_on_seed_and_realization_only() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    pipeline(&tmp);
    let run = |extra: &[&str]| {
        let mut args = vec!["sample-departures", "--cov", "rr.bin", "--obs", "obs.csv"];
        args.extend_from_slice(extra);
        ok(d, &args)
    };
    assert_eq!(run(&["--seed", "5"]), run(&["--seed", "5"]));
    assert_ne!(run(&["--seed", "5"]), run(&["--seed", "6"]));
    assert_ne!(run(&["--seed", "5"]), run(&["--seed", "5", "--realization", "1"]));
}

#[test]
fn experiment_output_is_deterministic_without_timing() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("sc.txt"),
        "scenario = rank-sweep\ngrid = 8x8\nlat_range = 54, 54.9\nlon_range = -6, -4.8\nrealizations = 2\nranks = 1, 3\nkinds = foar\n",
    )
    .unwrap();
    let a = ok(d, &["experiment", "--config", "sc.txt"]);
    let b = ok(d, &["experiment", "--config", "sc.txt"]);
    assert_eq!(a, b);
    let rows: Vec<_> = a.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("scenario,family,"));
    assert!(!rows[0].contains("wall_time"));
    assert!(rows[1..].iter().all(|r| r.ends_with(",ok")));

    let reseeded = ok(d, &["experiment", "--config", "sc.txt", "--seed", "1"]);
    assert_ne!(a, reseeded);
    let timed = ok(d, &["experiment", "--config", "sc.txt", "--timing"]);
    assert!(timed.lines().next().unwrap().ends_with("wall_time_s"));
}

#[test]
fn cost_model_and_tree_print_tables() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let csv = ok(d, &["cost-model", "--ts", "0", "--tw", "1"]);
    assert!(csv.starts_with("scheme,operation,participants,message_size,time_seconds,time_is_upper_bound"));
    assert!(csv.contains("svd-fmm"));
    ok(d, &["grid", "--lat-count", "8", "--lon-count", "8", "--out", "obs.csv"]);
    let tsv = ok(d, &["tree", "--obs", "obs.csv"]);
    assert!(tsv.starts_with("box_id\tlevel"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["no-such-command"]), 2);
    assert_eq!(code(d, &["invert", "--input", "missing.bin", "--out", "x.bin"]), 2);
    pipeline(&tmp);
    assert_eq!(code(d, &["invert", "--input", "a.bin", "--out", "x.bin"]), 2);
    assert_eq!(code(d, &["plan", "--matrix", "a.bin", "--obs", "obs.csv", "--rank", "0", "--out", "p.bin"]), 2);
    assert_eq!(code(d, &["recondition", "--input", "r.bin", "--method", "rr", "--kappa", "0.5", "--out", "x.bin"]), 2);
    std::fs::write(d.join("sc.txt"), "scenario = rank-sweep\nfoo = 1\n").unwrap();
    assert_eq!(code(d, &["experiment", "--config", "sc.txt"]), 2);

    // A closely spaced Gaussian R is numerically singular.
    ok(d, &["build-cov", "--obs", "obs.csv", "--kind", "gaussian", "--lengthscale", "200", "--out", "g.bin"]);
    assert_eq!(code(d, &["invert", "--input", "g.bin", "--out", "x.bin"]), 3);
}
