use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchwork"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn simulate(dir: &TempDir, name: &str, n: usize, seed: u64) -> String {
    let p = path(dir, name);
    ok(&[
        "simulate", "--n", &n.to_string(), "--d", "2", "--kernel", "exp", "--tau", "10", "--rho", "1", "--noise", "1",
        "--seed", &seed.to_string(), "--out", &p,
    ]);
    p
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(p).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn simulate_is_reproducible_and_writes_spec() {
    let dir = TempDir::new().unwrap();
    let a = simulate(&dir, "a.csv", 200, 3);
    let b = simulate(&dir, "b.csv", 200, 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("x1,x2,y,f_true\n"));
    assert_eq!(text.lines().count(), 201);
    let spec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(spec["n"], 200);
    assert_eq!(spec["seed"], 3);
}

#[test]
fn empty_simulation_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["simulate", "--n", "0", "--out", &path(&dir, "x.csv")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_csv_exits_with_input_error() {
    let dir = TempDir::new().unwrap();
    let model = path(&dir, "m.pwk");

    let no_y = path(&dir, "no_y.csv");
    std::fs::write(&no_y, "x1,x2\n1,2\n").unwrap();
    let out = run(&["fit", "--data", &no_y, "--model", &model]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`y`"));

    let garbled = path(&dir, "garbled.csv");
    std::fs::write(&garbled, "x1,y\n1,2\n3,abc\n").unwrap();
    let out = run(&["fit", "--data", &garbled, "--model", &model]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = run(&["fit", "--data", &path(&dir, "missing.csv"), "--model", &model]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn refit_reproduces_the_bundle() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", 400, 5);
    let (m1, m2) = (path(&dir, "m1.pwk"), path(&dir, "m2.pwk"));
    for m in [&m1, &m2] {
        ok(&[
            "fit", "--data", &data, "--model", m, "--k", "4", "--b", "5", "--kernel", "exp", "--tau", "10", "--noise", "1",
            "--seed", "9",
        ]);
    }
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
}

#[test]
fn fit_then_predict() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", 300, 11);
    let model = path(&dir, "m.pwk");
    ok(&["fit", "--data", &data, "--model", &model, "--k", "2", "--kernel", "exp", "--tau", "10", "--noise", "1"]);

    let query = path(&dir, "q.csv");
    std::fs::write(&query, "x1,x2\n1,1\n5,5\n9.5,0.5\n").unwrap();
    let out_csv = path(&dir, "pred.csv");
    ok(&["predict", "--model", &model, "--data", &query, "--out", &out_csv]);
    let rows = csv_rows(Path::new(&out_csv));
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let var: f64 = r[3].parse().unwrap();
        assert!((0.0..=10.0).contains(&var));
        assert!(r[4] == "0" || r[4] == "1");
    }

    let wrong_dim = path(&dir, "w.csv");
    std::fs::write(&wrong_dim, "x1\n1\n").unwrap();
    let out = run(&["predict", "--model", &model, "--data", &wrong_dim]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn optimize_writes_a_trace() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", 200, 13);
    let trace = path(&dir, "trace.csv");
    ok(&[
        "fit", "--data", &data, "--model", &path(&dir, "m.pwk"), "--k", "2", "--b", "3", "--optimize", "--budget", "40",
        "--trace", &trace,
    ]);
    let rows = csv_rows(Path::new(&trace));
    assert!(!rows.is_empty() && rows.len() <= 40);
}

#[test]
fn split_evaluation_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", 500, 17);
    let args = |out: &str| {
        vec![
            "evaluate".to_string(), "--data".into(), data.clone(), "--split".into(), "0.9".into(), "--seed".into(), "4".into(),
            "--k".into(), "4".into(), "--b".into(), "3".into(), "--kernel".into(), "exp".into(), "--tau".into(), "10".into(),
            "--noise".into(), "1".into(), "--n-interior".into(), "100".into(), "--n-boundary".into(), "20".into(),
            "--out".into(), out.to_string(),
        ]
    };
    let (a, b) = (path(&dir, "a.json"), path(&dir, "b.json"));
    for out in [&a, &b] {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["t"], 50);
    assert!(report["mse"].as_f64().unwrap() > 0.0);
    assert!(report["i_mse"].as_f64().is_some());
    assert!(report["msm"].as_f64().is_some());
    let row = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(row.lines().count(), 2);
}

#[test]
fn evaluate_rejects_dimension_mismatch() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "d.csv", 100, 19);
    let model = path(&dir, "m.pwk");
    ok(&["fit", "--data", &data, "--model", &model, "--k", "1"]);
    let test = path(&dir, "t.csv");
    std::fs::write(&test, "x1,y\n1,2\n").unwrap();
    let out = run(&["evaluate", "--model", &model, "--data", &test]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_rows_and_trend() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "sweep.csv");
    ok(&[
        "sweep", "--ks", "16,32", "--bs", "0,5", "--rhos", "1", "--dims", "2", "--replicates", "2", "--n", "1500",
        "--n-interior", "300", "--n-boundary", "60", "--seed", "1", "--out", &out,
    ]);
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[col("error")].is_empty()));

    for k in ["16", "32"] {
        let mean_imse = |b: &str| {
            let v: Vec<f64> =
                rows.iter().filter(|r| &r[col("k")] == k && &r[col("b")] == b).map(|r| r[col("i_mse")].parse().unwrap()).collect();
            assert_eq!(v.len(), 2);
            v.iter().sum::<f64>() / 2.0
        };
        assert!(mean_imse("5") < mean_imse("0"), "k={k}");
    }
}
