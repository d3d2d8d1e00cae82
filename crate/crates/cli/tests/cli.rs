use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn donut(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_donut"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = donut(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

const SMALL_SERIES: &[&str] = &["--set", "length=2880", "--set", "period=720"];
const SMALL_NET: &[&str] = &[
    "--set",
    "window=30",
    "--set",
    "hidden=16",
    "--set",
    "latent=3",
    "--epochs",
    "2",
];

fn synth(dir: &Path, out: &str, seed: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", out, "--seed", seed];
    args.extend_from_slice(SMALL_SERIES);
    args.extend_from_slice(extra);
    ok(&args, dir);
}

fn train(dir: &Path, data: &str, model: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data, "--model", model, "--seed", "4"];
    args.extend_from_slice(SMALL_NET);
    args.extend_from_slice(extra);
    ok(&args, dir)
}

fn detect(dir: &Path, data: &str, model: &str, out: &str, extra: &[&str]) {
    let mut args = vec![
        "detect", "--data", data, "--model", model, "--out", out, "--samples", "16",
    ];
    if !extra.contains(&"--seed") {
        args.extend(["--seed", "9"]);
    }
    args.extend_from_slice(extra);
    ok(&args, dir);
}

#[test]
fn usage_errors_exit_with_code_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(donut(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(donut(&["train"], dir.path()).status.code(), Some(1));
    let out = donut(
        &["synth", "--out", "x.csv", "--set", "no_such_key=1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn missing_config_file_fails_with_message() {
    let dir = TempDir::new().unwrap();
    let out = donut(
        &["synth", "--config", "absent.cfg", "--out", "x.csv"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.cfg"));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn synth_reads_config_file_and_flags_override_it() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("s.cfg"),
        "# small series\nlength = 1000\nperiod = 100\nseed = 1\n",
    )
    .unwrap();
    ok(&["synth", "--config", "s.cfg", "--out", "a.csv"], dir.path());
    ok(
        &["synth", "--config", "s.cfg", "--out", "b.csv", "--set", "length=500"],
        dir.path(),
    );
    assert_eq!(read(dir.path(), "a.csv").lines().count(), 1001);
    assert_eq!(read(dir.path(), "b.csv").lines().count(), 501);
}

#[test]
fn malformed_csv_names_line_and_exits_with_data_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("bad.csv"),
        "timestamp,value,label\n0,1.0,0\n60,abc,0\n",
    )
    .unwrap();
    let out = donut(
        &["train", "--data", "bad.csv", "--model", "m.txt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn synth_train_detect_evaluate_round_trip() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "s.csv", "3", &[]);
    train(d, "s.csv", "m.txt", &[]);
    assert!(read(d, "m.txt").starts_with("donut-model 1\n"));
    assert!(read(d, "m.trace.csv").contains("train_m_elbo"));

    detect(d, "s.csv", "m.txt", "scores.csv", &[]);
    let scores = read(d, "scores.csv");
    let rows: Vec<&str> = scores.lines().skip(1).collect();
    assert_eq!(rows.len(), read(d, "s.csv").lines().count() - 1);
    // The first W-1 points cannot end a window.
    assert!(rows[..29].iter().all(|r| r.ends_with(',')));
    assert!(!rows[29].ends_with(','));

    let out = ok(
        &["evaluate", "--scores", "scores.csv", "--truth", "s.csv", "--table", "t.csv"],
        d,
    );
    let report = String::from_utf8(out.stdout).unwrap();
    for key in ["best F-score:", "AUC:", "mean alert delay:"] {
        assert!(report.contains(key), "{report}");
    }
    assert!(read(d, "t.csv").starts_with("threshold,precision,recall,fscore\n"));

    let out = ok(
        &["diagnose", "--data", "s.csv", "--model", "m.txt", "--out", "lat.csv"],
        d,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("ratio:"));
    assert!(read(d, "lat.csv").starts_with("last_index,time_of_day,mu_0,mu_1,mu_2,sigma_0"));
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "a.csv", "5", &[]);
    synth(d, "b.csv", "5", &[]);
    assert_eq!(read(d, "a.csv"), read(d, "b.csv"));

    train(d, "a.csv", "m1.txt", &[]);
    train(d, "a.csv", "m2.txt", &[]);
    assert_eq!(read(d, "m1.txt"), read(d, "m2.txt"));

    detect(d, "a.csv", "m1.txt", "s1.csv", &[]);
    detect(d, "a.csv", "m2.txt", "s2.csv", &[]);
    assert_eq!(read(d, "s1.csv"), read(d, "s2.csv"));

    detect(d, "a.csv", "m1.txt", "s3.csv", &["--seed", "10"]);
    assert_ne!(read(d, "s1.csv"), read(d, "s3.csv"));
}

#[test]
fn no_mcmc_is_identical_on_fully_observed_data() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "s.csv", "6", &["--set", "missing_rate=0"]);
    assert!(!read(d, "s.csv").contains(",,"));
    train(d, "s.csv", "m.txt", &[]);
    detect(d, "s.csv", "m.txt", "with.csv", &[]);
    detect(d, "s.csv", "m.txt", "without.csv", &["--no-mcmc"]);
    assert_eq!(read(d, "with.csv"), read(d, "without.csv"));
}

#[test]
fn label_ratio_is_echoed_in_trace_header() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "s.csv", "7", &["--set", "anomaly_rate=0.02"]);
    let original = read(d, "s.csv")
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",1"))
        .count();
    train(d, "s.csv", "m.txt", &["--label-ratio", "0.1"]);
    let header = read(d, "m.trace.csv").lines().next().unwrap().to_string();
    let retained: usize = header
        .strip_prefix("# retained_labels=")
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected header `{header}`"));
    assert!(header.ends_with(&format!("original_labels={original}")), "{header}");
    assert!(retained > 0 && (retained as f64) <= 0.1 * original as f64 + 1e-9);
}

#[test]
fn detect_rejects_series_shorter_than_window() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "s.csv", "8", &[]);
    train(d, "s.csv", "m.txt", &[]);
    let short: String = read(d, "s.csv").lines().take(11).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("short.csv"), short).unwrap();
    let out = donut(
        &["detect", "--data", "short.csv", "--model", "m.txt", "--out", "x.csv"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tampered_model_is_rejected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "s.csv", "2", &[]);
    train(d, "s.csv", "m.txt", &[]);
    let text = read(d, "m.txt").replacen("epsilon 1e-4", "epsilon 2e-4", 1);
    std::fs::write(d.join("bad.txt"), text).unwrap();
    let out = donut(
        &["detect", "--data", "s.csv", "--model", "bad.txt", "--out", "x.csv"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

// ---------------------------------------------------------------------------
// `evaluate` against a brute-force reading of the bundled mini-fixture.

struct Fixture {
    anomaly: Vec<bool>,
    evaluable: Vec<bool>,
    score: Vec<f64>,
}

fn load_fixture(scores: &str) -> Fixture {
    let truth = std::fs::read_to_string(data("mini_truth.csv")).unwrap();
    let mut anomaly = Vec::new();
    let mut missing = Vec::new();
    for line in truth.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        missing.push(f[1].is_empty());
        anomaly.push(f[2] == "1");
    }
    let mut evaluable = Vec::new();
    let mut score = Vec::new();
    for (i, line) in scores.lines().skip(1).enumerate() {
        let s = line.split(',').nth(1).unwrap();
        evaluable.push(!s.is_empty() && !missing[i]);
        score.push(s.parse().unwrap_or(f64::NAN));
    }
    Fixture {
        anomaly,
        evaluable,
        score,
    }
}

/// Precision, recall and F at `threshold`; a flagged anomaly point flags
/// every evaluable point of its contiguous segment.
fn prf(fx: &Fixture, threshold: f64) -> (f64, f64, f64) {
    let n = fx.score.len();
    let hit = |i: usize| fx.evaluable[i] && fx.score[i] >= threshold;
    let mut flagged: Vec<bool> = (0..n).map(hit).collect();
    let mut start = 0;
    while start < n {
        if !fx.anomaly[start] {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < n && fx.anomaly[end] {
            end += 1;
        }
        if (start..end).any(hit) {
            for f in &mut flagged[start..end] {
                *f = true;
            }
        }
        start = end;
    }
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for i in (0..n).filter(|&i| fx.evaluable[i]) {
        match (fx.anomaly[i], flagged[i]) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fneg += 1.0,
            _ => {}
        }
    }
    let p: f64 = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
    let r: f64 = if tp + fneg == 0.0 { 1.0 } else { tp / (tp + fneg) };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn thresholds(fx: &Fixture) -> Vec<f64> {
    let mut t: Vec<f64> = (0..fx.score.len())
        .filter(|&i| fx.evaluable[i])
        .map(|i| fx.score[i])
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.push(f64::INFINITY);
    t
}

fn report_value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no `{key}` in report:\n{report}"))
}

fn evaluate(scores: &Path) -> String {
    let dir = TempDir::new().unwrap();
    let out = ok(
        &[
            "evaluate",
            "--scores",
            scores.to_str().unwrap(),
            "--truth",
            data("mini_truth.csv").to_str().unwrap(),
        ],
        dir.path(),
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn evaluate_matches_brute_force_on_mini_fixture() {
    let fx = load_fixture(&std::fs::read_to_string(data("mini_scores.csv")).unwrap());
    let ths = thresholds(&fx);
    let best = ths
        .iter()
        .map(|&t| prf(&fx, t).2)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for &t in ths.iter().rev() {
        let (p, r, _) = prf(&fx, t);
        auc += (r - prev_recall) * p;
        prev_recall = r;
    }

    let report = evaluate(&data("mini_scores.csv"));
    assert!((report_value(&report, "best F-score:") - best).abs() < 1e-6, "{report}");
    assert!((report_value(&report, "AUC:") - auc).abs() < 1e-6, "{report}");
    let evaluable = fx.evaluable.iter().filter(|&&e| e).count();
    assert_eq!(report_value(&report, "evaluable points:") as usize, evaluable);
}

#[test]
fn evaluate_ignores_scores_on_missing_points() {
    let original = std::fs::read_to_string(data("mini_scores.csv")).unwrap();
    assert!(original.contains(",99\n"));
    let dir = TempDir::new().unwrap();
    let changed = dir.path().join("changed.csv");
    std::fs::write(&changed, original.replace(",99\n", ",-5\n")).unwrap();
    assert_eq!(evaluate(&data("mini_scores.csv")), evaluate(&changed));
}
