use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dsebm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsebm"))
        .args(args)
        .current_dir(dir)
        .env_remove("DSEBM_EPOCHS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gaussian_split(dir: &Path) {
    let o = dsebm(
        dir,
        &["synth", "--kind", "gaussians", "--n", "600", "--seed", "4", "--rho", "0.2", "--train-out", "train.csv", "--test-out", "test.csv"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--arch", "dense", "--data", "train.csv", "--out", out, "--sigma", "0.1", "--seed", "7", "--epochs", "10", "--batch-size", "32"];
    args.extend_from_slice(extra);
    dsebm(dir, &args)
}

#[test]
fn training_and_scoring_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gaussian_split(dir);
    for out in ["a.dsebm", "b.dsebm"] {
        let o = train(dir, out, &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(dir.join("a.dsebm")).unwrap(), fs::read(dir.join("b.dsebm")).unwrap());
    for out in ["a.tsv", "b.tsv"] {
        let o = dsebm(dir, &["score", "--model", "a.dsebm", "--data", "test.csv", "--rho", "0.2", "--out", out, "--threads", "2"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(dir.join("a.tsv")).unwrap(), fs::read(dir.join("b.tsv")).unwrap());
}

fn column(report: &str, label: &str, col: usize) -> Vec<f64> {
    report
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("id\t"))
        .map(|l| l.split('\t').collect::<Vec<_>>())
        .filter(|c| c[1] == label)
        .map(|c| c[col].parse().unwrap())
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn planted_outliers_have_higher_energy() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gaussian_split(dir);
    assert_eq!(code(&train(dir, "m.dsebm", &[])), 0);
    let inl = dsebm(dir, &["score", "--model", "m.dsebm", "--data", "train.csv"]);
    let all = dsebm(dir, &["score", "--model", "m.dsebm", "--data", "test.csv"]);
    let inlier_energy = column(&stdout(&inl), "0", 3);
    let outlier_energy = column(&stdout(&all), "1", 3);
    assert!(median(inlier_energy) < median(outlier_energy));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = dsebm(tmp.path(), &["train", "--arch", "dense", "--out", "m.dsebm"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage: dsebm train"), "{}", stderr(&o));
    let o = dsebm(tmp.path(), &["train", "--epochs", "many"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&dsebm(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&dsebm(tmp.path(), &["train", "--help"])), 0);
    assert_eq!(code(&dsebm(tmp.path(), &["frobnicate"])), 1);
}

#[test]
fn nan_in_data_names_the_record() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.csv"), "x0,x1,label\n1,2,0\n3,NaN,0\n").unwrap();
    let o = dsebm(tmp.path(), &["train", "--arch", "dense", "--data", "bad.csv", "--out", "m.dsebm"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("record 3"), "{}", stderr(&o));
}

#[test]
fn empty_test_file_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gaussian_split(dir);
    assert_eq!(code(&train(dir, "m.dsebm", &[])), 0);
    fs::write(dir.join("empty.csv"), "x0,x1,label\n").unwrap();
    let o = dsebm(dir, &["score", "--model", "m.dsebm", "--data", "empty.csv"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn architecture_mismatch_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let o = dsebm(dir, &["synth", "--kind", "sequences", "--n", "20", "--d", "2", "--out", "seq.jsonl"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dsebm(dir, &["train", "--arch", "recurrent", "--data", "seq.jsonl", "--out", "r.dsebm", "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dsebm(dir, &["score", "--arch", "dense", "--model", "r.dsebm", "--data", "seq.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("architecture mismatch"), "{}", stderr(&o));
}

#[test]
fn divergence_is_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gaussian_split(dir);
    let o = train(dir, "m.dsebm", &["--lr", "1e6", "--momentum", "0.5"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn eval_reproduces_hand_built_confusion() {
    let tmp = TempDir::new().unwrap();
    // 20 samples, 5 outliers; the top four scores hold three outliers.
    let mut text = String::from("id\tlabel\toutlier\tenergy\trecon_error\tflag_energy\tflag_recon\n");
    let outliers = [19, 18, 17, 10, 5];
    for i in 0..20 {
        let label = if outliers.contains(&i) { "1" } else { "0" };
        text.push_str(&format!("s{i}\t{label}\t\t{}\t{}\t\t\n", i as f64, i as f64 / 10.0));
    }
    fs::write(tmp.path().join("fixture.tsv"), text).unwrap();
    let o = dsebm(tmp.path(), &["eval", "--scores", "fixture.tsv", "--rho", "0.2", "--sweep-out", "sweep.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for c in ["energy", "recon"] {
        assert_eq!(v[c]["precision"], 0.75);
        assert_eq!(v[c]["recall"], 0.6);
        assert_eq!(v[c]["tp"], 3);
        assert_eq!(v[c]["fp"], 1);
        assert_eq!(v[c]["fn"], 2);
    }
    let sweep = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert!(sweep.contains("criterion,threshold,precision,recall,f1"));
    assert_eq!(sweep.lines().filter(|l| l.starts_with("energy,")).count(), 20);
}

#[test]
fn gradcheck_passes_and_replays() {
    let tmp = TempDir::new().unwrap();
    let a = dsebm(tmp.path(), &["gradcheck", "--seed", "5", "--instances", "5"]);
    let b = dsebm(tmp.path(), &["gradcheck", "--seed", "5", "--instances", "5"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).matches("PASS").count(), 6);
}

#[test]
fn bimodal_landscape_has_two_wells() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let o = dsebm(dir, &["synth", "--kind", "bimodal", "--seed", "23", "--rho", "0.2", "--train-out", "tr.csv", "--test-out", "te.csv"]);
    assert_eq!(code(&o), 0);
    let o = dsebm(dir, &["train", "--arch", "dense", "--data", "tr.csv", "--out", "b.dsebm", "--epochs", "200", "--batch-size", "32", "--seed", "23"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dsebm(dir, &["score", "--model", "b.dsebm", "--data", "te.csv", "--rho", "0.2", "--out", "s.tsv"]);
    assert_eq!(code(&o), 0);
    let o = dsebm(dir, &["landscape", "--model", "b.dsebm", "--scores", "s.tsv", "--lo=-4", "--hi", "4", "--resolution", "801", "--out", "l.csv", "--svg", "l.svg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let csv = fs::read_to_string(dir.join("l.csv")).unwrap();
    assert!(csv.contains("# thresholds energy="));
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("x0"))
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 801);
    assert_eq!(rows[0][0], -4.0);
    assert_eq!(rows[800][0], 4.0);
    let e: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let minima: Vec<usize> = (1..800).filter(|&i| e[i] < e[i - 1] && e[i] < e[i + 1]).collect();
    let maxima: Vec<usize> = (1..800).filter(|&i| e[i] > e[i - 1] && e[i] > e[i + 1]).collect();
    assert!(minima.len() >= 2, "{minima:?}");
    assert!(!maxima.is_empty());
    for i in minima.into_iter().chain(maxima) {
        assert!(rows[i][2] < 1e-4, "gradient at critical point {}: {}", rows[i][0], rows[i][2]);
    }
    let svg = fs::read_to_string(dir.join("l.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("threshold"));
}

#[test]
fn landscape_rejects_high_dimensional_models() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let o = dsebm(dir, &["synth", "--kind", "gaussians", "--d", "3", "--n", "40", "--out", "g.csv"]);
    assert_eq!(code(&o), 0);
    let o = dsebm(dir, &["train", "--arch", "dense", "--data", "g.csv", "--out", "g.dsebm", "--epochs", "1"]);
    assert_eq!(code(&o), 0);
    let o = dsebm(dir, &["landscape", "--model", "g.dsebm", "--out", "l.csv"]);
    assert_eq!(code(&o), 1);
}

fn trace_epochs(dir: &Path, path: &str) -> usize {
    fs::read_to_string(dir.join(path))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch") && !l.starts_with("0,"))
        .count()
}

#[test]
fn flags_override_config_which_overrides_environment() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gaussian_split(dir);
    fs::write(dir.join("run.conf"), "# training\nepochs = 2\nbatch_size = 64\n").unwrap();
    let base = ["train", "--arch", "dense", "--data", "train.csv", "--out", "m.dsebm"];

    let mut args = base.to_vec();
    args.extend(["--config", "run.conf", "--epochs", "3"]);
    assert_eq!(code(&dsebm(dir, &args)), 0);
    assert_eq!(trace_epochs(dir, "m.dsebm.trace.csv"), 3);
    let trace = fs::read_to_string(dir.join("m.dsebm.trace.csv")).unwrap();
    assert!(trace.contains("# config batch-size=64"));

    let mut args = base.to_vec();
    args.extend(["--config", "run.conf"]);
    let o = Command::new(env!("CARGO_BIN_EXE_dsebm"))
        .args(&args)
        .current_dir(dir)
        .env("DSEBM_EPOCHS", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(trace_epochs(dir, "m.dsebm.trace.csv"), 2);

    let o = Command::new(env!("CARGO_BIN_EXE_dsebm"))
        .args(base)
        .current_dir(dir)
        .env("DSEBM_EPOCHS", "4")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(trace_epochs(dir, "m.dsebm.trace.csv"), 4);
}

#[test]
fn image_and_sequence_pipelines_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let o = dsebm(dir, &["synth", "--kind", "images", "--n", "40", "--size", "8", "--rho", "0.2", "--train-out", "tr.dsbt", "--test-out", "te.dsbt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dsebm(dir, &["train", "--arch", "conv", "--data", "tr.dsbt", "--layers", "conv:2x3,pool:2,dense:4", "--out", "c.dsebm", "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dsebm(dir, &["eval", "--model", "c.dsebm", "--data", "te.dsbt", "--rho", "0.2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["samples"], 13);
}
