use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use meanfield::io::{read_trajectory_csv, read_trajectory_jsonl, read_vector_csv};
use serde_json::Value;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mfnet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfnet"))
        .args(args)
        .arg("--out")
        .arg(out)
        .current_dir(repo())
        .output()
        .unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn pi_of(dir: &Path) -> Vec<f64> {
    let f = fs::File::open(dir.join("pi.csv")).unwrap();
    read_vector_csv(BufReader::new(f)).unwrap().as_slice().to_vec()
}

#[test]
fn solve_mm1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfnet(tmp.path(), &["solve", "--model", "configs/mm1.cfg", "--init", "geometric:0.5", "--eps", "1e-10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let pi = pi_of(tmp.path());
    assert!((pi[0] - 0.5).abs() < 1e-8);
    assert!((pi[3] - 0.0625).abs() < 1e-8);
    let report = json(tmp.path().join("solve.json"));
    assert_eq!(report["meta"]["format_version"], 1);
    assert_eq!(report["report"]["converged"], true);
    assert_eq!(report["report"]["certificate"]["pass"], true);
}

#[test]
fn solve_symmetric_two_state() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfnet(tmp.path(), &["solve", "--model", "configs/linear2.cfg", "--init", "custom:0.9,0.1"]);
    assert!(out.status.success());
    assert_eq!(pi_of(tmp.path()), vec![0.5, 0.5]);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["solve", "--model", "configs/missing.cfg"][..],
        &["solve", "--model", "configs/mm1.cfg", "--init", "geometric:1.5"],
        &["solve", "--model", "configs/mm1.cfg", "--eps", "-1"],
        &["integrate", "--model", "configs/mm1.cfg"],
        &["simulate", "--model", "configs/linear2.cfg", "--N", "0", "--T", "1"],
        &["check", "--model", "configs/supermarket.cfg", "--mean-drift"],
    ] {
        let out = mfnet(tmp.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "family = supermarket\nlevels = 4\nlambda = fast\n").unwrap();
    let out = mfnet(tmp.path(), &["solve", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn unconverged_solve_exits_1_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfnet(tmp.path(), &["solve", "--model", "configs/supermarket.cfg", "--max-iter", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(tmp.path().join("solve.json"))["report"]["converged"], false);
}

#[test]
fn written_pi_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(mfnet(&a, &["solve", "--model", "configs/supermarket.cfg", "--eps", "1e-12"]).status.success());
    let from_report: Vec<f64> = serde_json::from_value(json(a.join("solve.json"))["report"]["pi"]["values"].clone()).unwrap();
    assert_eq!(pi_of(&a), from_report);

    // restarting at the written point stays there
    let c = tmp.path().join("c");
    for (dir, file) in [(&b, "pi.csv"), (&c, "solve.json")] {
        let init = format!("file:{}", a.join(file).display());
        let out = mfnet(dir, &["solve", "--model", "configs/supermarket.cfg", "--eps", "1e-12", "--init", &init]);
        assert!(out.status.success());
        let report = json(dir.join("solve.json"));
        assert!(report["report"]["iterations"].as_u64().unwrap() <= 1);
        let gap: f64 = pi_of(dir).iter().zip(&from_report).map(|(x, y)| (x - y).abs()).sum();
        assert!(gap < 1e-12, "{gap}");
    }
}

#[test]
fn trajectory_files_round_trip_and_continue() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let out = mfnet(&a, &["integrate", "--model", "configs/supermarket.cfg", "--T", "4", "--dt", "0.5"]);
    assert!(out.status.success());
    let table = read_trajectory_csv(BufReader::new(fs::File::open(a.join("trajectory.csv")).unwrap())).unwrap();
    assert_eq!(table.times.len(), 9);
    assert_eq!(table.layout.dim(), 33);
    let meta = json(a.join("trajectory.meta.json"));
    assert_eq!(meta["args"]["t_end"], 4.0);
    assert!(meta["model_text"].as_str().unwrap().contains("supermarket"));

    // continuing from the last row matches a rerun from the same row
    let init = format!("file:{}", a.join("trajectory.csv").display());
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for dir in [&b, &c] {
        let out = mfnet(dir, &["integrate", "--model", "configs/supermarket.cfg", "--T", "1", "--init", &init]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(b.join("trajectory.csv")).unwrap(), fs::read(c.join("trajectory.csv")).unwrap());
    let cont = read_trajectory_csv(BufReader::new(fs::File::open(b.join("trajectory.csv")).unwrap())).unwrap();
    assert_eq!(cont.rows[0], *table.rows.last().unwrap());
}

#[test]
fn simulate_writes_tagged_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfnet(
        tmp.path(),
        &["simulate", "--model", "configs/supermarket.cfg", "--N", "1000", "--T", "50", "--seed", "7", "--format", "jsonl"],
    );
    assert!(out.status.success());
    let (header, table) = read_trajectory_jsonl(BufReader::new(fs::File::open(tmp.path().join("empirical.jsonl")).unwrap())).unwrap();
    assert_eq!(header.format_version, 1);
    assert_eq!(table.n, Some(1000));
    assert_eq!(table.seed, Some(7));
    assert_eq!(table.times.len(), 101);
    assert_eq!(header.meta["args"]["seed"], 7);
    for row in &table.rows {
        for v in row {
            assert_eq!((v * 1000.0).round(), v * 1000.0);
        }
    }
}

#[test]
fn out_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mfnet"))
        .args(["factorize", "--model", "configs/linear2.cfg"])
        .env("MFNET_OUT_DIR", tmp.path())
        .current_dir(repo())
        .output()
        .unwrap();
    assert!(out.status.success());
    let f = json(tmp.path().join("factors.json"));
    assert!(f["reconstruction_error"].as_f64().unwrap() < 1e-12);
    assert_eq!(f["stationary"], serde_json::json!([0.5, 0.5]));
}

#[test]
fn mean_drift_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfnet(tmp.path(), &["check", "--model", "configs/mm1qbd.cfg", "--mean-drift", "--at", "geometric:0.5"]);
    assert!(out.status.success());
    let c = json(tmp.path().join("check.json"));
    assert_eq!(c["mean_drift"]["stable"], true);
    assert!(c["mean_drift"]["up_rate"].as_f64().unwrap() < c["mean_drift"]["down_rate"].as_f64().unwrap());
    assert!(c.get("lipschitz").is_none());
}

#[test]
fn check_linear_runs_entropy_and_lyapunov() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfnet(tmp.path(), &["check", "--model", "configs/linear2.cfg", "--at", "custom:1,0", "--entropy-q", "custom:1,1"]);
    assert!(out.status.success());
    let c = json(tmp.path().join("check.json"));
    assert_eq!(c["entropy"]["positive_formula_points"], 0);
    assert_eq!(c["lyapunov"]["violating_points"], serde_json::json!([]));
    assert_eq!(c["certificate"]["pass"], false);
    let entropy = fs::read_to_string(tmp.path().join("entropy.csv")).unwrap();
    assert!(entropy.starts_with("t,r,dr_dt_numeric,dr_dt_formula\n0,"));
    assert!(entropy.lines().nth(1).unwrap().ends_with("-inf"));
}

#[test]
fn bistable_scan_is_metastable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfnet(tmp.path(), &["scan", "--model", "configs/bistable.cfg", "--seeds", "recipes:default20"]);
    assert!(out.status.success());
    let scan = json(tmp.path().join("scan.json"));
    assert_eq!(scan["report"]["metastable"], true);
    assert_eq!(scan["report"]["seeds"].as_array().unwrap().len(), 20);
    let m = json(tmp.path().join("metastability.json"));
    assert_eq!(m["report"]["count_stable"], 2);
    let limits = fs::read_to_string(tmp.path().join("scan_limits.csv")).unwrap();
    assert_eq!(limits.lines().filter(|l| l.contains("locally_stable")).count(), 2);
}

#[test]
fn censored_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mfnet(tmp.path(), &["compare-censored", "--model", "configs/mm1qbd.cfg", "--T", "2", "--dt", "0.5", "--init", "uniform:4"]);
    assert!(out.status.success());
    let text = fs::read_to_string(tmp.path().join("censored_gap.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,gap,lhs_1,rhs_1,error");
    assert_eq!(lines.count(), 5);
}
