use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn sepcor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepcor")).args(args).env_remove("SEPCOR_SEED").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stderr(o)))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_identity_fixture_converges() {
    let y = fixture("identity_n60_r2_c3.csv");
    let o = sepcor(&["fit", "--y", path_str(&y), "--header", "--r", "2", "--c", "3", "--trace"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["termination"], "Converged");
    assert_eq!(v["model"], "sepcor");
    assert_eq!(v["U"]["dims"], serde_json::json!([3, 3]));
    assert_eq!(v["V"]["dims"], serde_json::json!([2, 2]));
    assert_eq!(v["beta"]["dims"], serde_json::json!([1, 6]));
    assert_eq!(v["w"].as_array().unwrap().len(), 6);
    assert!(v["objective_trace"].as_array().unwrap().len() >= 2);
    assert!(v.get("sigma").is_none());
}

#[test]
fn dimension_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let y = dir.path().join("y.csv");
    std::fs::write(&y, "1,2,3,4,5\n2,1,0,3,1\n0,0,1,2,2\n").unwrap();
    let o = sepcor(&["fit", "--y", path_str(&y), "--r", "3", "--c", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("r*c=6 != q=5"), "{}", stderr(&o));
}

#[test]
fn malformed_csv_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let y = dir.path().join("y.csv");
    std::fs::write(&y, "1,2,3,4\n2,abc,0,3\n").unwrap();
    let o = sepcor(&["fit", "--y", path_str(&y), "--r", "2", "--c", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2, column 2"), "{}", stderr(&o));

    std::fs::write(&y, "1,2,3,4\n2,1,0\n").unwrap();
    let o = sepcor(&["fit", "--y", path_str(&y), "--r", "2", "--c", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2 has 3 columns"), "{}", stderr(&o));

    std::fs::write(&y, "1,2,3,4\n2,NaN,0,1\n").unwrap();
    let o = sepcor(&["fit", "--y", path_str(&y), "--r", "2", "--c", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn unrestricted_needs_enough_rows() {
    let dir = tempfile::tempdir().unwrap();
    let y = dir.path().join("y.csv");
    std::fs::write(&y, "1,2,3,4\n2,1,0,3\n0,5,1,2\n").unwrap();
    let o = sepcor(&["fit", "--y", path_str(&y), "--r", "2", "--c", "2", "--model", "unrestricted"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not estimable"), "{}", stderr(&o));
}

#[test]
fn exit_codes_follow_termination() {
    let y = fixture("identity_n60_r2_c3.csv");
    let o = sepcor(&["fit", "--y", path_str(&y), "--header", "--r", "2", "--c", "3", "--max-iter", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(json(&o)["termination"], "MaxIterations");

    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("y.csv");
    std::fs::write(&small, "1,2,0.5,3,1.5,0.1\n2,1,1.5,0,2.5,0.9\n").unwrap();
    let o = sepcor(&["fit", "--y", path_str(&small), "--r", "2", "--c", "3"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(json(&o)["termination"], "IndefiniteU");
}

#[test]
fn sigma_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sigma.csv");
    let y = fixture("identity_n60_r2_c3.csv");
    for model in ["sepcor", "sepcov", "unrestricted"] {
        let o = sepcor(&[
            "fit",
            "--y",
            path_str(&y),
            "--header",
            "--r",
            "2",
            "--c",
            "3",
            "--model",
            model,
            "--emit-sigma",
            "--sigma-csv",
            path_str(&csv),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let from_json: Vec<f64> =
            json(&o)["sigma"]["data"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let text = std::fs::read_to_string(&csv).unwrap();
        let from_csv: Vec<f64> = text.lines().flat_map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap())).collect();
        assert_eq!(from_json.len(), 36);
        assert_eq!(from_json, from_csv, "{model}");
    }
}

#[test]
fn transposed_cells_give_the_same_fit() {
    let y = fixture("identity_n60_r2_c3.csv");
    let (r, c) = (2, 3);
    let text = std::fs::read_to_string(&y).unwrap();
    let mut out = String::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        // row-major column l·c + k holds vec position k·r + l
        let row: Vec<&str> = (0..r * c).map(|j| cells[(j % c) * r + j / c]).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.csv");
    std::fs::write(&t, out).unwrap();
    let a = sepcor(&["fit", "--y", path_str(&y), "--header", "--r", "2", "--c", "3"]);
    let b = sepcor(&["fit", "--y", path_str(&t), "--r", "2", "--c", "3", "--transpose-cells"]);
    assert_eq!(a.stdout, b.stdout);
}

fn run_test(fixture_name: &str, r: &str, c: &str, hypothesis: &str, workers: &str) -> Output {
    let y = fixture(fixture_name);
    sepcor(&[
        "test",
        "--y",
        path_str(&y),
        "--r",
        r,
        "--c",
        c,
        "--hypothesis",
        hypothesis,
        "--b",
        "99",
        "--seed",
        "11",
        "--workers",
        workers,
    ])
}

#[test]
fn bootstrap_output_is_deterministic() {
    for hypothesis in ["cov-vs-cor", "cor-vs-unrestricted"] {
        let a = run_test("sepcov_n40_r2_c3.csv", "2", "3", hypothesis, "1");
        assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
        let b = run_test("sepcov_n40_r2_c3.csv", "2", "3", hypothesis, "3");
        let again = run_test("sepcov_n40_r2_c3.csv", "2", "3", hypothesis, "1");
        assert_eq!(a.stdout, b.stdout);
        assert_eq!(a.stdout, again.stdout);
        let v = json(&a);
        assert_eq!(v["hypothesis"], hypothesis);
        let p = v["p_value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(v["seed"], 11);
    }
}

#[test]
fn bootstrap_rejects_non_separable_covariance() {
    let o = run_test("evenly_n320_r5_c5.csv", "5", "5", "cov-vs-cor", "2");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&o)["reject"], true);
}

#[test]
fn seed_defaults_to_environment() {
    let y = fixture("sepcov_n40_r2_c3.csv");
    let args = ["test", "--y", path_str(&y), "--r", "2", "--c", "3", "--hypothesis", "cov-vs-cor", "--b", "9"];
    let o = Command::new(env!("CARGO_BIN_EXE_sepcor")).args(args).env("SEPCOR_SEED", "5").output().unwrap();
    assert_eq!(json(&o)["seed"], 5);
    let mut with_flag = args.to_vec();
    with_flag.extend(["--seed", "6"]);
    let o = Command::new(env!("CARGO_BIN_EXE_sepcor")).args(&with_flag).env("SEPCOR_SEED", "5").output().unwrap();
    assert_eq!(json(&o)["seed"], 6);
}

#[test]
fn unrestricted_test_needs_rows() {
    let dir = tempfile::tempdir().unwrap();
    let y = dir.path().join("y.csv");
    std::fs::write(&y, "1,2,3,4\n2,1,0,3\n0,5,1,2\n3,3,1,0\n").unwrap();
    let o = sepcor(&["test", "--y", path_str(&y), "--r", "2", "--c", "2", "--hypothesis", "cor-vs-unrestricted"]);
    assert_eq!(o.status.code(), Some(1));
}

const HEADER: &str = "n,r,c,w_kind,err_cor,se_err_cor,err_cov,se_err_cov,err_ur,se_err_ur,rej_cov,rej_cov_b,rej_cor,rej_cor_b,term_converged,term_maxiter,term_indef_u,term_indef_v";

fn simulate(config: &str, workers: &str) -> (Output, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("out.csv");
    std::fs::write(&cfg, config).unwrap();
    let o = sepcor(&["simulate", "--config", path_str(&cfg), "--out", path_str(&out), "--workers", workers]);
    let csv = std::fs::read_to_string(&out).unwrap_or_default();
    (o, csv)
}

#[test]
fn simulate_single_replicate() {
    let config = r#"{"tests": {"bootstrap_replicates": 9},
        "scenarios": [{"n": 30, "r": 2, "c": 3, "u_kind": {"ar1": 0.5}, "v_kind": {"ar1": 0.5},
                       "w_kind": "identity", "m": 1, "seed": 4}]}"#;
    let (o, a) = simulate(config, "1");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], HEADER);
    assert!(lines[1].starts_with("30,2,3,identity,"));
    let (_, b) = simulate(config, "3");
    assert_eq!(a, b);
}

#[test]
fn simulate_reports_indefinite_terminations() {
    let config = r#"{"scenarios": [
        {"n": 4, "r": 2, "c": 9, "u_kind": {"ar1": 0.5}, "v_kind": {"ar1": 0.5}, "w_kind": "identity", "m": 20, "seed": 1},
        {"n": 10, "r": 2, "c": 9, "u_kind": {"ar1": 0.5}, "v_kind": {"ar1": 0.5}, "w_kind": "identity", "m": 20, "seed": 1}]}"#;
    let (o, csv) = simulate(config, "2");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert!(rows[0][16].parse::<usize>().unwrap() > 0);
    assert_eq!(rows[1][14], "20");
    // n ≤ q: no unrestricted estimate
    assert_eq!(rows[0][8], "");
}

#[test]
fn simulate_rejects_bad_config_with_pointer() {
    let config = r#"{"scenarios": [{"n": 30, "r": 2, "c": 3, "u_kind": {"ar1": 0.5}, "v_kind": {"ar1": 2.0},
                       "w_kind": "identity"}]}"#;
    let (o, _) = simulate(config, "1");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/scenarios/0/v_kind"), "{}", stderr(&o));
    let (o, _) = simulate(r#"{"scenarios": [{"n": "ten"}]}"#, "1");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/scenarios/0/n"), "{}", stderr(&o));
}
