use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mvgps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvgps")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mvgps(args);
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

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

/// Simulates a scenario into `dir`, returning the data and spec paths.
fn simulate(dir: &Path, scenario: &str, rho: &str, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let data = dir.join(format!("{scenario}-{seed}.csv"));
    ok(&["simulate", "--scenario", scenario, "--rho", rho, "--n", &n.to_string(), "--seed", &seed.to_string(), "--output", s(&data)]);
    let spec = dir.join(format!("{scenario}-{seed}.spec.json"));
    (data, spec)
}

fn read_column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[col].parse().unwrap()).collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn quantile7(x: &[f64], p: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[test]
fn mvgps_weights_are_positive_with_mean_near_one() {
    let dir = TempDir::new().unwrap();
    let (data, spec) = simulate(dir.path(), "M3", "0.3", 500, 17);
    let w = dir.path().join("w.csv");
    ok(&["weights", "--data", s(&data), "--spec", s(&spec), "--method", "mvgps", "--output", s(&w)]);
    let weights = read_column(&w, "weight");
    assert_eq!(weights.len(), 500);
    assert!(weights.iter().all(|&v| v > 0.0));
    let mean = weights.iter().sum::<f64>() / 500.0;
    assert!((mean - 1.0).abs() < 0.2, "mean {mean}");
    let ids = read_column(&w, "row_id");
    assert_eq!(ids[0], 1.0);
    assert_eq!(ids[499], 500.0);

    let manifest = json(&dir.path().join("w.csv.manifest.json"));
    assert_eq!(manifest["command"], "weights");
    assert_eq!(manifest["config"]["method"], "mvGPS");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn exposure_index_out_of_range_exits_2() {
    let dir = TempDir::new().unwrap();
    let (data, spec) = simulate(dir.path(), "M1", "0", 100, 1);
    let out = mvgps(&["weights", "--data", s(&data), "--spec", s(&spec), "--method", "gps-uni:3", "--output", s(&dir.path().join("w.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

#[test]
fn trimmed_maximum_is_the_upper_quantile() {
    let dir = TempDir::new().unwrap();
    let (data, spec) = simulate(dir.path(), "M2", "0.5", 400, 4);
    let raw = dir.path().join("raw.csv");
    let trimmed = dir.path().join("trimmed.csv");
    ok(&["weights", "--data", s(&data), "--spec", s(&spec), "--output", s(&raw)]);
    ok(&["weights", "--data", s(&data), "--spec", s(&spec), "--trim", "0.99", "--output", s(&trimmed)]);
    let w = read_column(&raw, "weight");
    let t = read_column(&trimmed, "weight");
    let max = t.iter().copied().fold(f64::MIN, f64::max);
    let min = t.iter().copied().fold(f64::MAX, f64::min);
    let hi = quantile7(&w, 0.99);
    let lo = quantile7(&w, 0.01);
    assert!((max - hi).abs() <= 1e-15 * hi, "{max} vs {hi}");
    assert!((min - lo).abs() <= 1e-15 * lo, "{min} vs {lo}");
    assert_eq!(json(&dir.path().join("trimmed.csv.manifest.json"))["config"]["trim"], 0.99);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let (data, spec) = simulate(dir.path(), "M3", "0.1", 300, 9);
    let other = TempDir::new().unwrap();
    let (again, _) = simulate(other.path(), "M3", "0.1", 300, 9);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        ok(&["weights", "--data", s(&data), "--spec", s(&spec), "--method", "entropy:2", "--output", s(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn unit_weights_reproduce_unweighted_balance() {
    let dir = TempDir::new().unwrap();
    let (data, spec) = simulate(dir.path(), "M1", "0.3", 250, 2);
    let ones = dir.path().join("ones.csv");
    let mut text = String::from("row_id,weight\n");
    for i in 1..=250 {
        text.push_str(&format!("{i},1\n"));
    }
    fs::write(&ones, text).unwrap();
    let report = dir.path().join("b.json");
    let pairs = dir.path().join("pairs.csv");
    ok(&["balance", "--data", s(&data), "--spec", s(&spec), "--weights", s(&ones), "--unweighted", "--scope", "all-covariates", "--output", s(&report), "--pairs", s(&pairs)]);
    let r = json(&report);
    let (a, b) = (&r[0], &r[1]);
    assert_eq!(a["pairs"], b["pairs"]);
    assert_eq!(a["max_abs_corr"], b["max_abs_corr"]);
    assert_eq!(a["avg_abs_corr"], b["avg_abs_corr"]);
    assert_eq!(a["ess"], 250.0);
    assert_eq!(b["method"], "unweighted");

    let mut rdr = csv::Reader::from_path(&pairs).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["method", "exposure", "covariate", "corr"]);
    assert_eq!(rdr.records().count(), 2 * 2 * 10);
}

#[test]
fn true_weights_balance_large_sample() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("big.csv");
    let tw = dir.path().join("tw.csv");
    ok(&["simulate", "--scenario", "M3", "--rho", "0", "--n", "10000", "--seed", "1", "--output", s(&data), "--true-weights", s(&tw)]);
    let report = dir.path().join("b.json");
    let stdout = ok(&["balance", "--data", s(&data), "--spec", s(&dir.path().join("big.spec.json")), "--weights", s(&tw), "--output", s(&report)]);
    let row = stdout.lines().nth(2).unwrap();
    let max: f64 = row.split('|').nth(1).unwrap().trim().parse().unwrap();
    assert!(max <= 0.05, "printed max abs corr {max}");
}

#[test]
fn missing_or_short_weights_exit_2() {
    let dir = TempDir::new().unwrap();
    let (data, spec) = simulate(dir.path(), "M1", "0", 50, 3);
    let out = mvgps(&["balance", "--data", s(&data), "--spec", s(&spec), "--weights", "no-such-weights.csv", "--output", s(&dir.path().join("b.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("No such file"));

    let short = dir.path().join("short.csv");
    fs::write(&short, "row_id,weight\n1,1\n2,1\n").unwrap();
    let out = mvgps(&["balance", "--data", s(&data), "--spec", s(&spec), "--weights", s(&short), "--output", s(&dir.path().join("b.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 weights for 50 data rows"));
}

#[test]
fn schema_violations_name_the_column() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    let spec = dir.path().join("spec.json");
    fs::write(&data, "Y,D1,D2,X1\n1,0.5,0.1,2\n2,NA,0.3,1\n3,1.5,0.2,0\n").unwrap();
    fs::write(&spec, r#"{"outcome":"Y","exposures":["D1","D2"],"confounders":[["X1"],["X1"]]}"#).unwrap();
    let out = mvgps(&["weights", "--data", s(&data), "--spec", s(&spec), "--output", s(&dir.path().join("w.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("column `D1`") && err.contains("missing value at row 2"), "{err}");

    fs::write(&spec, r#"{"outcome":"Y","exposures":["D1","D3"],"confounders":[["X1"],["X1"]]}"#).unwrap();
    let out = mvgps(&["weights", "--data", s(&data), "--spec", s(&spec), "--output", s(&dir.path().join("w.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("column `D3` not found"));

    fs::write(&spec, r#"{"outcome":"Y","exposures":["D1"],"confounders":[["X1"]],"extra":1}"#).unwrap();
    let out = mvgps(&["weights", "--data", s(&data), "--spec", s(&spec), "--output", s(&dir.path().join("w.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn linear_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("lin.csv");
    let spec = dir.join("lin.spec.json");
    let mut text = String::from("Y,D1,D2,X1\n");
    for i in 0..200 {
        let t = i as f64;
        let d1 = (t * 0.37).sin() * 2.0 + (t * 0.011);
        let d2 = (t * 0.71).cos() * 1.5 - (t * 0.3).sin();
        let x = (t * 0.13).cos();
        let y = 2.0 + 1.5 * d1 - 0.7 * d2;
        text.push_str(&format!("{y:.17e},{d1:.17e},{d2:.17e},{x:.17e}\n"));
    }
    fs::write(&data, text).unwrap();
    fs::write(&spec, r#"{"outcome":"Y","exposures":["D1","D2"],"confounders":[["X1"],["X1"]]}"#).unwrap();
    (data, spec)
}

#[test]
fn surface_recovers_noiseless_slopes() {
    let dir = TempDir::new().unwrap();
    let (data, spec) = linear_dataset(dir.path());
    let out = dir.path().join("surface.csv");
    ok(&["surface", "--data", s(&data), "--spec", s(&spec), "--region", "box", "--output", s(&out)]);
    let coef = json(&dir.path().join("surface.coefficients.json"));
    let est: Vec<f64> = coef["estimates"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (e, t) in est.iter().zip([2.0, 1.5, -0.7]) {
        assert!((e - t).abs() < 1e-8, "{est:?}");
    }
    assert_eq!(coef["retained"], 200);
    assert_eq!(coef["ess"], 200.0);
}

fn inside(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let scale = poly.iter().flatten().fold(1.0f64, |a, v| a.max(v.abs()));
    (0..poly.len()).all(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-12 * scale * scale
    })
}

#[test]
fn surface_grid_lies_in_exported_hull() {
    let dir = TempDir::new().unwrap();
    let (data, spec) = simulate(dir.path(), "M3", "0.3", 300, 21);
    let w = dir.path().join("w.csv");
    ok(&["weights", "--data", s(&data), "--spec", s(&spec), "--output", s(&w)]);
    let out = dir.path().join("surface.csv");
    ok(&["surface", "--data", s(&data), "--spec", s(&spec), "--weights", s(&w), "--region", "hull", "--q", "0.95", "--grid", "500", "--interaction", "--output", s(&out)]);
    let hull = dir.path().join("hull.csv");
    ok(&["hull", "--data", s(&data), "--spec", s(&spec), "--q", "0.95", "--output", s(&hull)]);

    let xs = read_column(&hull, "x");
    let ys = read_column(&hull, "y");
    let poly: Vec<[f64; 2]> = xs.iter().zip(&ys).map(|(&x, &y)| [x, y]).collect();
    let d1 = read_column(&out, "d1");
    let d2 = read_column(&out, "d2");
    assert_eq!(d1.len(), 500);
    assert_eq!(read_column(&out, "yhat").len(), 500);
    for (&a, &b) in d1.iter().zip(&d2) {
        assert!(inside(&poly, [a, b]), "({a}, {b}) outside");
    }

    let coef = json(&dir.path().join("surface.coefficients.json"));
    let terms: Vec<&str> = coef["terms"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(terms, ["(Intercept)", "D1", "D2", "D1:D2"]);
    assert_eq!(coef["method"], "mvGPS");
    let vertices: Vec<[f64; 2]> = serde_json::from_value(coef["region"]["vertices"].clone()).unwrap();
    assert_eq!(vertices, poly);
}

#[test]
fn degenerate_hull_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("line.csv");
    let spec = dir.path().join("line.spec.json");
    let mut text = String::from("Y,D1,D2,X1\n");
    for i in 0..30 {
        let t = i as f64;
        text.push_str(&format!("{},{},{},{}\n", t, t, 2.0 * t + 1.0, (t * 0.5).sin()));
    }
    fs::write(&data, text).unwrap();
    fs::write(&spec, r#"{"outcome":"Y","exposures":["D1","D2"],"confounders":[["X1"],["X1"]]}"#).unwrap();
    let out = mvgps(&["surface", "--data", s(&data), "--spec", s(&spec), "--region", "hull", "--output", s(&dir.path().join("s.csv"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_study_config_reports_field_path() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"scenarios":["M1","M9"],"rho_grid":[0],"methods":["mvgps"],"trim_levels":[1],"reps":2,"master_seed":1}"#).unwrap();
    let out = mvgps(&["study", "--config", s(&cfg), "--output-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenarios[1]"));

    fs::write(&cfg, r#"{"scenarios":["M1"],"rho_grid":[0],"methods":["mvgps"],"trim_levels":[1],"reps":2,"master_seed":1,"nreps":3}"#).unwrap();
    let out = mvgps(&["study", "--config", s(&cfg), "--output-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nreps"));

    fs::write(&cfg, r#"{"scenarios":["M1"],"rho_grid":[0],"methods":["mvgps"],"trim_levels":[0.2],"reps":2,"master_seed":1}"#).unwrap();
    let out = mvgps(&["study", "--config", s(&cfg), "--output-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn study_seed_changes_values_not_schema() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, r#"{"scenarios":["M1"],"rho_grid":[0.3],"methods":["mvgps","unweighted"],"trim_levels":[1,0.95],"reps":3,"master_seed":5,"n":150}"#).unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&["study", "--config", s(&cfg), "--output-dir", s(&out), "--seed", seed, "--jobs", "2"]);
        out
    };
    let (a, b) = (run("1", "a"), run("2", "b"));
    let read = |p: PathBuf| -> Vec<csv::StringRecord> {
        csv::Reader::from_path(p).unwrap().records().map(Result::unwrap).collect()
    };
    let (ra, rb) = (read(a.join("study.csv")), read(b.join("study.csv")));
    assert_eq!(ra.len(), 2 * 2 * 5);
    assert_eq!(ra.len(), rb.len());
    let mut differ = 0;
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.iter().take(6).collect::<Vec<_>>(), y.iter().take(6).collect::<Vec<_>>());
        if x[6] != y[6] {
            differ += 1;
        }
    }
    assert!(differ > 0);
    assert_eq!(json(&b.join("manifest.json"))["master_seed"], 2);
}

#[test]
fn bundled_full_config_spans_the_study_grid() {
    let cfg = json(&asset("paper-full.json"));
    assert_eq!(cfg["scenarios"].as_array().unwrap().len(), 3);
    assert_eq!(cfg["rho_grid"], serde_json::json!([0.0, 0.1, 0.3, 0.5, 0.7, 0.9]));
    assert_eq!(cfg["methods"].as_array().unwrap().len(), 6);
    assert_eq!(cfg["trim_levels"], serde_json::json!([1.0, 0.99, 0.95]));
    assert_eq!(cfg["reps"], 1000);
    assert_eq!(cfg["n"], 200);
    let smoke = json(&asset("paper-smoke.json"));
    assert_eq!(smoke["reps"], 25);
    let parsed: mvgps::StudyConfig = serde_json::from_value(cfg).unwrap();
    parsed.validate().unwrap();
}

#[test]
fn scenario_assets_match_builtins() {
    for name in ["M1", "M2", "M3"] {
        let printed: Value = serde_json::from_str(&ok(&["scenario", name])).unwrap();
        assert_eq!(printed, json(&asset(&format!("{name}.json"))), "{name}");
    }
    let out = mvgps(&["scenario", "M4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_from_scenario_file() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["simulate", "--config", s(&asset("M2.json")), "--n", "80", "--seed", "3", "--output", s(&a)]);
    ok(&["simulate", "--scenario", "M2", "--n", "80", "--seed", "3", "--output", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(read_column(&a, "Y").len(), 80);
}
