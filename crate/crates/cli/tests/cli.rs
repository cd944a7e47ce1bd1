use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dart_core::engine::read_outcomes;
use dart_core::image::{encode_pnm, ImagePlane};
use dart_core::optimizer::{grid_search, quantile_candidates, ObjectiveConfig, DEFAULT_GRID_CAP};
use dart_core::policy::read_policy;
use dart_core::trace::read_trace;
use serde_json::Value;
use tempfile::TempDir;

fn dart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dart"))
        .args(args)
        .env_remove("DART_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dart(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.path().join(name);
    let mut args = vec!["synth", "--out", s(&path)];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn difficulty_of_missing_file_exits_2() {
    let out = dart(&["difficulty", "/definitely/not/here.pgm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("here.pgm"));
}

#[test]
fn constant_image_has_zero_difficulty() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("flat.pgm");
    fs::write(&img, encode_pnm(&ImagePlane::constant(16, 12, 1, 0.5).unwrap())).unwrap();
    let rows = csv_rows(&ok(&["difficulty", s(&img), "--format", "csv"]));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][4].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn edge_only_weights_fuse_to_edge_density() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("ramp.pgm");
    let plane = ImagePlane::from_fn(20, 20, |x, y| if x > 9 { 0.9 } else { (y as f64) / 40.0 }).unwrap();
    fs::write(&img, encode_pnm(&plane)).unwrap();
    let rows = csv_rows(&ok(&["difficulty", s(&img), "--weights", "1,0,0", "--format", "csv"]));
    assert_eq!(rows[0][1], rows[0][4]);
    assert!(rows[0][1].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn one_bad_file_among_good_ones_still_scores_the_rest() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("flat.pgm");
    fs::write(&img, encode_pnm(&ImagePlane::constant(8, 8, 1, 0.2).unwrap())).unwrap();
    let bad = dir.path().join("junk.pgm");
    fs::write(&bad, b"not an image").unwrap();
    let out = dart(&["difficulty", s(&img), s(&bad), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(csv_rows(&String::from_utf8(out.stdout).unwrap()).len(), 1);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a.jsonl", &["--samples", "300", "--seed", "4"]);
    let b = synth(&dir, "b.jsonl", &["--samples", "300", "--seed", "4"]);
    let c = synth(&dir, "c.jsonl", &["--samples", "300", "--seed", "5"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn single_exit_trace_is_valid() {
    let dir = TempDir::new().unwrap();
    let t = synth(&dir, "t.jsonl", &["--exits", "1", "--samples", "50"]);
    let trace = read_trace(fs::read(&t).unwrap().as_slice()).unwrap();
    assert_eq!(trace.num_exits(), 1);
    let out = dir.path().join("o.jsonl");
    ok(&["simulate", "--trace", s(&t), "--out", s(&out)]);
    let outcomes = read_outcomes(fs::read(&out).unwrap().as_slice()).unwrap();
    assert!(outcomes.iter().all(|o| o.chosen_exit == 1));
}

#[test]
fn zero_samples_is_a_usage_error() {
    let out = dart(&["synth", "--samples", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grid_optimize_matches_library() {
    let dir = TempDir::new().unwrap();
    let t = synth(&dir, "t.jsonl", &["--samples", "2000", "--seed", "3"]);
    let policy = dir.path().join("p.json");
    ok(&["optimize", "--trace", s(&t), "--out", s(&policy)]);
    let file = read_policy(fs::read(&policy).unwrap().as_slice()).unwrap();

    let trace = read_trace(fs::read(&t).unwrap().as_slice()).unwrap();
    let q: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let cands = quantile_candidates(&trace, &q).unwrap();
    let r = grid_search(&cands, &trace, &ObjectiveConfig::new(0.3).unwrap(), DEFAULT_GRID_CAP).unwrap();
    assert_eq!(file.thresholds, r.thresholds.values());
    assert_eq!(file.meta["objective"].as_f64().unwrap(), r.objective);
    assert_eq!(file.meta["method"], "grid");
}

#[test]
fn zero_cost_weight_never_exits_earlier_than_needed() {
    let dir = TempDir::new().unwrap();
    let t = synth(&dir, "t.jsonl", &["--samples", "1000"]);
    let zero = dir.path().join("z.json");
    let default = dir.path().join("d.json");
    ok(&["optimize", "--trace", s(&t), "--beta-opt", "0", "--out", s(&zero)]);
    ok(&["optimize", "--trace", s(&t), "--out", s(&default)]);
    let z = read_policy(fs::read(&zero).unwrap().as_slice()).unwrap();
    let d = read_policy(fs::read(&default).unwrap().as_slice()).unwrap();
    let sum = |v: &[f64]| v.iter().sum::<f64>();
    assert!(sum(&z.thresholds) >= sum(&d.thresholds));
}

#[test]
fn dp_optimize_writes_a_policy() {
    let dir = TempDir::new().unwrap();
    let t = synth(&dir, "t.jsonl", &["--samples", "2000"]);
    let policy = dir.path().join("p.json");
    ok(&["optimize", "--trace", s(&t), "--method", "dp", "--out", s(&policy)]);
    let file = read_policy(fs::read(&policy).unwrap().as_slice()).unwrap();
    assert_eq!(file.thresholds.len(), 2);
    assert_eq!(file.meta["method"], "dp");
    assert!(file.meta["non_monotone"].is_array());
}

#[test]
fn unit_thresholds_reproduce_the_static_model() {
    let dir = TempDir::new().unwrap();
    let t = synth(&dir, "t.jsonl", &["--exits", "4", "--samples", "500"]);
    let out = dir.path().join("o.jsonl");
    ok(&["simulate", "--trace", s(&t), "--out", s(&out)]);
    let outcomes = read_outcomes(fs::read(&out).unwrap().as_slice()).unwrap();
    assert!(outcomes.iter().all(|o| o.chosen_exit == 4));

    let report: Value = serde_json::from_str(&ok(&["report", "--outcomes", s(&out), "--format", "json"])).unwrap();
    assert_eq!(report["run"]["mean_time_ms"].as_f64().unwrap(), 1.0);
    assert_eq!(report["run"]["mean_energy_mj"].as_f64().unwrap(), 50.0);
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let t = synth(&dir, "t.jsonl", &["--samples", "800", "--seed", "9"]);
    let policy = dir.path().join("p.json");
    ok(&["optimize", "--trace", s(&t), "--out", s(&policy)]);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["simulate", "--trace", s(&t), "--policy", s(&policy), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        fs::read(out).unwrap()
    };
    assert_eq!(run("a", &[]), run("b", &["--jobs", "1"]));
    assert_eq!(run("c", &["--adaptive"]), run("d", &["--adaptive"]));
    assert_eq!(
        run("e", &["--shuffle", "--seed", "2"]),
        run("f", &["--shuffle", "--seed", "2"])
    );
}

#[test]
fn adaptation_lowers_easy_and_raises_hard_class_coefficients() {
    let dir = TempDir::new().unwrap();
    let t = synth(
        &dir,
        "t.jsonl",
        &["--samples", "3000", "--classes", "3", "--bias", "0=-0.3", "--bias", "2=0.3"],
    );
    let policy = dir.path().join("p.json");
    fs::write(&policy, r#"{"thresholds": [0.8, 0.3], "beta_diff": 0.3}"#).unwrap();
    let log = dir.path().join("log.jsonl");
    let adapted = dir.path().join("adapted.json");
    ok(&[
        "simulate", "--trace", s(&t), "--policy", s(&policy), "--adaptive",
        "--adapt-log", s(&log), "--policy-out", s(&adapted),
    ]);

    let events: Vec<Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!events.is_empty());
    let last = |class: u64| {
        events
            .iter()
            .rev()
            .find(|e| e["class"].as_u64() == Some(class))
            .map(|e| e["new"][0].as_f64().unwrap())
            .unwrap()
    };
    assert!(last(0) < 1.0, "easy class {}", last(0));
    assert!(last(2) > 1.0, "hard class {}", last(2));

    let file = read_policy(fs::read(&adapted).unwrap().as_slice()).unwrap();
    let coeffs = file.coefficients.unwrap();
    assert_eq!(coeffs.for_class(Some(0))[0], last(0));
    assert_eq!(coeffs.for_class(Some(2))[0], last(2));
}

#[test]
fn summary_report_reproduces_published_daes() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("summary.csv");
    fs::write(
        &csv,
        "dataset,model,method,accuracy,time_ms,energy_mj,alpha\n\
         mnist,AlexNet,Static,0.9897,0.09,5.90,0.76\n\
         mnist,AlexNet,BranchyNet,0.9913,0.08,5.27,0.76\n\
         mnist,AlexNet,DART,0.9931,0.03,1.15,0.76\n\
         cifar10,AlexNet,Static,0.8529,0.08,5.18,0.85\n\
         cifar10,AlexNet,BranchyNet,0.8315,0.07,4.57,0.85\n\
         cifar10,AlexNet,DART,0.8286,0.05,1.88,0.85\n",
    )
    .unwrap();
    let rows: Vec<Value> = serde_json::from_str(&ok(&["report", "--summary", s(&csv), "--format", "json"])).unwrap();
    let published = [0.562, 0.713, 8.684, 0.461, 0.579, 1.978];
    assert_eq!(rows.len(), published.len());
    for (row, want) in rows.iter().zip(published) {
        let got = row["daes"].as_f64().unwrap();
        assert!((got - want).abs() <= 0.01, "{row}: {got} vs {want}");
    }

    let table = ok(&["report", "--summary", s(&csv)]);
    assert!(table.contains("0.562") && table.contains("0.461"), "{table}");
}

#[test]
fn comparing_a_run_with_itself_gives_unit_speedup() {
    let dir = TempDir::new().unwrap();
    let t = synth(&dir, "t.jsonl", &["--samples", "400"]);
    let out = dir.path().join("o.jsonl");
    ok(&["simulate", "--trace", s(&t), "--out", s(&out)]);
    let v: Value = serde_json::from_str(&ok(&[
        "report", "--outcomes", s(&out), "--baseline", s(&out), "--format", "json",
    ]))
    .unwrap();
    let c = &v["comparison"];
    assert_eq!(c["speedup"].as_f64().unwrap(), 1.0);
    assert_eq!(c["power_efficiency"].as_f64().unwrap(), 1.0);
    assert_eq!(c["daes_baseline"], c["daes_candidate"]);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let from_env = dir.path().join("env.jsonl");
    let status = Command::new(env!("CARGO_BIN_EXE_dart"))
        .args(["synth", "--samples", "100", "--out", s(&from_env)])
        .env("DART_SEED", "77")
        .status()
        .unwrap();
    assert!(status.success());
    let explicit = synth(&dir, "flag.jsonl", &["--samples", "100", "--seed", "77"]);
    assert_eq!(fs::read(from_env).unwrap(), fs::read(explicit).unwrap());
}
