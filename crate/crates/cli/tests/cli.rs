use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn nme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nme"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = nme(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sim_config(drivers: usize, weeks: u32, pi_intercept: f64, seed: u64) -> Value {
    json!({
        "n_drivers": drivers,
        "weeks_per_driver": weeks,
        "omega": [0.6, 0.4],
        "groups": [
            { "intercept": 0.5f64.ln(), "coefficients": [0.5, -0.5], "inflation_intercept": pi_intercept },
            { "intercept": 5f64.ln(), "coefficients": [-0.5, 0.5], "inflation_intercept": pi_intercept }
        ],
        "exposure": { "law": "constant", "value": 1.0 },
        "n_features": 2,
        "seed": seed
    })
}

/// Writes a config, simulates, and returns the CSV path.
fn simulate(dir: &TempDir, name: &str, config: &Value) -> PathBuf {
    let cfg = dir.path().join(format!("{name}.config.json"));
    fs::write(&cfg, config.to_string()).unwrap();
    let prefix = dir.path().join(name);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&prefix)]);
    dir.path().join(format!("{name}.csv"))
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn simulate_writes_one_row_per_driver_week() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "sim", &sim_config(10, 4, -1.0, 1));
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "driver_id");
    assert_eq!(&header[2], "total_distance");
    assert_eq!(reader.records().count(), 40);
    let truth = read_json(&dir.path().join("sim.truth.json"));
    assert_eq!(truth["truth"]["memberships"].as_object().unwrap().len(), 10);
}

#[test]
fn full_inflation_gives_only_zeros() {
    let dir = TempDir::new().unwrap();
    // inflation logit of 60 gives a structural zero probability of 1 in f64
    let csv = simulate(&dir, "zeros", &sim_config(20, 5, 60.0, 2));
    for row in csv_rows(&csv) {
        for col in 3..9 {
            assert_eq!(&row[col], "0");
        }
    }
}

#[test]
fn invalid_simulation_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let mut cfg = sim_config(10, 4, 0.0, 1);
    cfg["omega"] = json!([0.5, 0.2]);
    let path = dir.path().join("bad.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = nme(&["simulate", "--config", s(&path), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn poisson_fit_counts_intercept_and_slopes() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "p", &sim_config(40, 6, -1.0, 3));
    let out = dir.path().join("fit.json");
    ok(&["fit", "--input", s(&csv), "--model", "poisson", "--out", s(&out)]);
    let v = read_json(&out);
    let summary = &v["summary"];
    assert_eq!(summary["family"], "poisson");
    let p = summary["selected_features"].as_array().unwrap().len() + 1;
    assert_eq!(summary["n_params"].as_u64().unwrap() as usize, p);
    assert_eq!(v["manifest"]["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn gzigp_with_zero_theta_matches_gzip() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "g", &sim_config(60, 8, -1.0, 4));
    let a = dir.path().join("gzip.json");
    let b = dir.path().join("gzigp.json");
    ok(&["fit", "--input", s(&csv), "--model", "gzip", "--seed", "7", "--out", s(&a)]);
    ok(&["fit", "--input", s(&csv), "--model", "gzigp", "--theta", "0", "--seed", "7", "--out", s(&b)]);
    let la = read_json(&a)["summary"]["loglik"].as_f64().unwrap();
    let lb = read_json(&b)["summary"]["loglik"].as_f64().unwrap();
    assert!((la - lb).abs() < 1e-6, "{la} vs {lb}");
}

#[test]
fn gzip_recovers_mixing_weights() {
    let dir = TempDir::new().unwrap();
    let prefix = dir.path().join("two");
    ok(&["simulate", "--preset", "two-group", "--seed", "0", "--out", s(&prefix)]);
    let csv = dir.path().join("two.csv");
    let out = dir.path().join("fit.json");
    ok(&["fit", "--input", s(&csv), "--model", "gzip", "--groups", "2", "--out", s(&out)]);
    let v = read_json(&out);
    let mut omega: Vec<f64> = v["model"]["model"]["omega"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w.as_f64().unwrap())
        .collect();
    omega.sort_by(|a, b| b.total_cmp(a));
    assert!((omega[0] - 0.6).abs() <= 0.05, "{omega:?}");
    assert!((omega[1] - 0.4).abs() <= 0.05, "{omega:?}");
}

#[test]
fn cv_reports_five_folds_deterministically() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "cv", &sim_config(50, 8, -1.0, 5));
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["cv", "--input", s(&csv), "--model", "gzip", "--seed", "3", "--out", s(&a)]);
    ok(&["cv", "--input", s(&csv), "--model", "gzip", "--seed", "3", "--out", s(&b)]);
    let (ra, rb) = (read_json(&a)["report"].clone(), read_json(&b)["report"].clone());
    assert_eq!(ra["fold_deviance"].as_array().unwrap().len(), 5);
    assert_eq!(ra, rb);
}

#[test]
fn zip_beats_poisson_on_zero_brier() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "z", &sim_config(80, 10, 0.5, 6));
    let brier = |model: &str| {
        let out = dir.path().join(format!("{model}.json"));
        ok(&["cv", "--input", s(&csv), "--model", model, "--out", s(&out)]);
        read_json(&out)["report"]["brier_zero"].as_f64().unwrap()
    };
    let (zip, poisson) = (brier("zip"), brier("poisson"));
    assert!(zip < poisson, "{zip} vs {poisson}");
}

#[test]
fn cv_writes_csv_row() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "c", &sim_config(20, 5, -1.0, 7));
    let out = dir.path().join("row.csv");
    ok(&["cv", "--input", s(&csv), "--model", "poisson", "--csv", s(&out), "--out", s(&dir.path().join("o.json"))]);
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "poisson");
}

#[test]
fn sweep_single_cell_per_target() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "s", &sim_config(30, 6, -1.0, 8));
    let prefix = dir.path().join("sweep");
    ok(&[
        "sweep", "--input", s(&csv), "--models", "gzigp", "--g-list", "1", "--theta-grid", "0", "--targets",
        "harsh_braking,nme_total", "--folds", "3", "--out", s(&prefix),
    ]);
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 2);
    let targets: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert!(targets.contains(&"harsh_braking") && targets.contains(&"nme_total"));
    assert!(rows.iter().all(|r| &r[1] == "gzigp" && &r[2] == "1"));
    let json = read_json(&dir.path().join("sweep.json"));
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_grid_and_resume() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "r", &sim_config(30, 6, -1.0, 9));
    let prefix = dir.path().join("grid");
    let args = [
        "sweep", "--input", s(&csv), "--models", "poisson,gzigp", "--g-list", "1,2", "--theta-grid", "0,0.5",
        "--targets", "harsh_braking", "--folds", "3", "--restarts", "1", "--out", s(&prefix),
    ];
    ok(&args);
    let first = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(csv_rows(&dir.path().join("grid.csv")).len(), 1 + 4);

    // keep two journal rows and resume the rest
    let journal = dir.path().join("grid.journal.jsonl");
    let lines: Vec<String> = fs::read_to_string(&journal).unwrap().lines().take(2).map(String::from).collect();
    fs::write(&journal, lines.join("\n") + "\n").unwrap();
    let mut resumed = args.to_vec();
    resumed.push("--resume");
    ok(&resumed);
    assert_eq!(fs::read_to_string(dir.path().join("grid.csv")).unwrap(), first);
    assert_eq!(fs::read_to_string(&journal).unwrap().lines().count(), 5);
}

#[test]
fn score_reproduces_fitted_loglik() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "f", &sim_config(40, 6, -1.0, 10));
    for model in ["zip", "gzip"] {
        let fit = dir.path().join(format!("{model}.json"));
        let scored = dir.path().join(format!("{model}.score.json"));
        let pred = dir.path().join(format!("{model}.pred.csv"));
        ok(&["fit", "--input", s(&csv), "--model", model, "--out", s(&fit)]);
        ok(&[
            "score", "--model", s(&fit), "--input", s(&csv), "--predictions", s(&pred), "--out", s(&scored),
        ]);
        let v = read_json(&scored);
        let (ll, stored) = (v["loglik"].as_f64().unwrap(), v["stored_loglik"].as_f64().unwrap());
        assert!((ll - stored).abs() <= 1e-8 * (1.0 + ll.abs()), "{model}: {ll} vs {stored}");
        assert_eq!(csv_rows(&pred).len(), 240);
    }
}

#[test]
fn environment_variables_set_flags() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "e", &sim_config(20, 5, -1.0, 11));
    let out = dir.path().join("fit.json");
    let status = Command::new(env!("CARGO_BIN_EXE_nme"))
        .args(["fit", "--out", s(&out)])
        .env("NME_INPUT", &csv)
        .env("NME_MODEL", "poisson")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(read_json(&out)["summary"]["family"], "poisson");
}

#[test]
fn configuration_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "x", &sim_config(4, 3, -1.0, 12));
    let missing = dir.path().join("missing.csv");
    assert_eq!(nme(&["fit", "--input", s(&missing)]).status.code(), Some(2));
    assert_eq!(nme(&["fit", "--input", s(&csv), "--model", "negbin"]).status.code(), Some(2));
    assert_eq!(nme(&["fit", "--input", s(&csv), "--theta", "1.5", "--model", "gzigp"]).status.code(), Some(2));
    assert_eq!(nme(&["cv", "--input", s(&csv), "--folds", "5"]).status.code(), Some(2));
    let not_a_model = dir.path().join("m.json");
    fs::write(&not_a_model, "{}").unwrap();
    assert_eq!(nme(&["score", "--model", s(&not_a_model), "--input", s(&csv)]).status.code(), Some(2));
}

#[test]
fn sweep_with_no_successful_cell_exits_3() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(&dir, "few", &sim_config(3, 4, -1.0, 13));
    let prefix = dir.path().join("fail");
    let out = nme(&[
        "sweep", "--input", s(&csv), "--models", "poisson", "--targets", "harsh_braking", "--folds", "5", "--out",
        s(&prefix),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let rows = csv_rows(&dir.path().join("fail.csv"));
    assert_eq!(&rows[0][15], "failed");
}

#[test]
fn long_help_documents_input_columns() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in ["total_distance", "sum_harsh_braking", "driver_id", "NME_TARGET", "EXIT CODES"] {
        assert!(text.contains(needle), "missing {needle}");
    }
}
