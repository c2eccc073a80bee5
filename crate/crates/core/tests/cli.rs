use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icipw::estimators::EstimateReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn icipw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icipw"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn file(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, contents).unwrap();
        p
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn four_row(fx: &Fixture) -> (PathBuf, PathBuf) {
    let data = fx.file("data.csv", "w1,a,y\n0.1,1,1.0\n0.2,0,2.0\n0.3,1,3.0\n0.4,1,4.0\n");
    let scores = fx.file("scores.csv", "pi1,pi0\n0.2,0.8\n0.3,0.7\n0.6,0.4\n0.9,0.1\n");
    (data, scores)
}

/// Randomized design with constant effect 2: `Y = W1 + 2A + noise`.
fn randomized_csv(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::from("w1,w2,a,y\n");
    for _ in 0..n {
        let (w1, w2): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let a = u32::from(rng.random::<f64>() < 0.5);
        let y = w1 + 2.0 * f64::from(a) + 0.5 * (rng.random::<f64>() - 0.5);
        writeln!(s, "{w1},{w2},{a},{y}").unwrap();
    }
    s
}

fn read_report(out: &Output) -> EstimateReport {
    assert_eq!(code(out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    EstimateReport::parse(out.stdout.as_slice()).unwrap()
}

#[test]
fn calibrate_golden_four_rows() {
    let fx = Fixture::new();
    let (data, scores) = four_row(&fx);
    let out = fx.path("w.csv");
    let r = icipw(&["calibrate", "--data", path_str(&data), "--scores", path_str(&scores), "--out", path_str(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let two = "2.0000000000000000e0";
    let one = "1.0000000000000000e0";
    let expected = format!(
        "alpha1_star,alpha0_star\n{two},{two}\n{two},{two}\n{one},{two}\n{one},{two}\n"
    );
    assert_eq!(fs::read_to_string(&out).unwrap(), expected);
    let balance = fs::read_to_string(fx.path("w.csv.balance.csv")).unwrap();
    assert!(balance.starts_with("level_value,count,stabilized_mean,deviation\n"));
    assert!(balance.contains("# level=1 level_sets=2 excluded=0 max_abs_deviation=0.0000000000000000e0"));
    assert!(balance.contains("# level=0 level_sets=1 excluded=2 max_abs_deviation=0.0000000000000000e0"));
}

#[test]
fn calibrate_min_segment_sizes() {
    let fx = Fixture::new();
    let data = fx.file("data.csv", &randomized_csv(300, 5));
    let out = fx.path("w.csv");
    let r = icipw(&[
        "calibrate", "--data", path_str(&data), "--fit-scores", "--folds", "5",
        "--min-segment", "20", "--level", "1", "--out", path_str(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in text.lines().skip(1) {
        *counts.entry(line).or_default() += 1;
    }
    assert!(counts.len() > 1);
    assert!(counts.values().all(|&c| c >= 20), "{counts:?}");
}

#[test]
fn calibrate_usage_errors() {
    let fx = Fixture::new();
    let (data, scores) = four_row(&fx);
    let out = fx.path("w.csv");
    assert_eq!(code(&icipw(&["calibrate", "--scores", path_str(&scores), "--out", path_str(&out)])), 2);
    assert_eq!(code(&icipw(&["calibrate", "--data", path_str(&data), "--out", path_str(&out)])), 2);
    let bad = fx.file("bad.csv", "w1,a,y\n0.1,1,oops\n");
    let r = icipw(&["calibrate", "--data", path_str(&bad), "--scores", path_str(&scores), "--out", path_str(&out)]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("row 1"));
}

#[test]
fn estimate_recovers_known_effect() {
    let fx = Fixture::new();
    let data = fx.file("data.csv", &randomized_csv(2000, 9));
    let d = path_str(&data);
    let r = read_report(&icipw(&["estimate", "--data", d, "--method", "aipw", "--weights", "ic", "--seed", "3"]));
    assert_eq!(r.method, "aipw+ic");
    assert!((r.psi - 2.0).abs() <= 3.0 * r.se / (r.n as f64).sqrt(), "{r:?}");

    let t = read_report(&icipw(&["estimate", "--data", d, "--method", "aipw", "--weights", "trim:0.01"]));
    assert_eq!(t.method, "aipw+trim:0.01");
    let t = read_report(&icipw(&["estimate", "--data", d, "--method", "tmle", "--weights", "ic"]));
    assert_eq!(t.method, "tmle+ic");
    for w in ["invert", "trim-adaptive", "platt", "drop:0.05"] {
        let r = read_report(&icipw(&["estimate", "--data", d, "--method", "ipw", "--weights", w]));
        assert_eq!(r.method, format!("ipw+{w}"));
    }
}

#[test]
fn estimate_is_deterministic_and_writes_file() {
    let fx = Fixture::new();
    let data = fx.file("data.csv", &randomized_csv(300, 1));
    let (a, b) = (fx.path("a.txt"), fx.path("b.txt"));
    for p in [&a, &b] {
        let r = icipw(&["estimate", "--data", path_str(&data), "--method", "aipw", "--weights", "ic", "--seed", "7", "--out", path_str(p)]);
        assert_eq!(code(&r), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn estimate_exit_codes() {
    let fx = Fixture::new();
    let data = fx.file("data.csv", &randomized_csv(200, 2));
    let d = path_str(&data);
    assert_eq!(code(&icipw(&["estimate", "--data", d, "--method", "aipw", "--weights", "isotonic"])), 2);
    assert_eq!(code(&icipw(&["estimate", "--data", d, "--method", "ols", "--weights", "ic"])), 2);
    assert_eq!(code(&icipw(&["estimate", "--data", d, "--method", "aipw", "--weights", "trim:0.9"])), 2);
    // Dropping at 0.5 keeps no rows: the estimator itself fails.
    assert_eq!(code(&icipw(&["estimate", "--data", d, "--method", "aipw", "--weights", "drop:0.5"])), 1);
}

#[test]
fn simulate_shape_determinism_and_validation() {
    let fx = Fixture::new();
    let (a, b) = (fx.path("a.csv"), fx.path("b.csv"));
    let run = |out: &Path| {
        icipw(&[
            "simulate", "--dgp", "limited-overlap", "--n", "200", "--reps", "4", "--folds", "5",
            "--seed", "3", "--methods", "ic_aipw,inversion,ic_tmle", "--out", path_str(out),
        ])
    };
    assert_eq!(code(&run(&a)), 0);
    assert_eq!(code(&run(&b)), 0);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(fs::read_to_string(&b).unwrap(), text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,bias,se,rmse,coverage,reps_ok,reps_failed");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("ic_aipw,"));

    let out = path_str(&a);
    assert_eq!(code(&icipw(&["simulate", "--dgp", "good-overlap", "--n", "200", "--reps", "1", "--out", out])), 2);
    assert_eq!(code(&icipw(&["simulate", "--dgp", "poor-overlap", "--n", "200", "--reps", "4", "--out", out])), 2);
    assert_eq!(code(&icipw(&["simulate", "--dgp", "good-overlap", "--n", "200", "--reps", "4", "--methods", "magic", "--out", out])), 2);
}

fn summary_value(text: &str, key: &str) -> f64 {
    let needle = format!("{key}=");
    text.lines()
        .filter(|l| l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .find_map(|t| t.strip_prefix(&needle))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

#[test]
fn diagnose_reports() {
    let fx = Fixture::new();
    let data = fx.file("data.csv", &randomized_csv(400, 4));
    let d = path_str(&data);
    let w = fx.path("w.csv");
    let r = icipw(&["calibrate", "--data", d, "--fit-scores", "--folds", "5", "--out", path_str(&w)]);
    assert_eq!(code(&r), 0);

    // Scores unrelated to the outcome model; IC balance holds for any scores.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pi: Vec<f64> = (0..400).map(|_| rng.random_range(0.2..0.8)).collect();
    let mut s = String::from("pi1,pi0\n");
    for p in &pi {
        writeln!(s, "{p},{}", 1.0 - p).unwrap();
    }
    let scores = fx.file("scores.csv", &s);

    let ic = icipw(&["diagnose", "--data", d, "--scores", path_str(&scores)]);
    assert_eq!(code(&ic), 0);
    let text = String::from_utf8(ic.stdout).unwrap();
    assert!(summary_value(&text, "max_abs_deviation") <= 1e-10);
    assert!(text.contains("# boundary_count="));

    let mut naive = String::from("alpha1_star\n");
    for p in &pi {
        writeln!(naive, "{}", 1.0 / p).unwrap();
    }
    let naive = fx.file("naive.csv", &naive);
    let mut truth = String::from("pi1\n");
    for p in &pi {
        writeln!(truth, "{p}").unwrap();
    }
    let truth = fx.file("truth.csv", &truth);
    let r = icipw(&["diagnose", "--data", d, "--weights-file", path_str(&naive), "--pi0-file", path_str(&truth)]);
    assert_eq!(code(&r), 0);
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(summary_value(&text, "max_abs_deviation") > 0.0);
    assert!(summary_value(&text, "cal_error") <= 1e-24);
    assert!(summary_value(&text, "weight_rmse") <= 1e-12);

    assert_eq!(code(&icipw(&["diagnose", "--data", d])), 2);
}
