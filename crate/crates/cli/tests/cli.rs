use std::path::Path;
use std::process::{Command, Output};

fn bikd(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bikd"))
        .args(args)
        .env("BIKD_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], root: &Path) -> String {
    let out = bikd(args, root);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts a usage-class failure with a single machine-parsable line.
fn fails(args: &[&str], root: &Path) -> String {
    let out = bikd(args, root);
    assert_eq!(out.status.code(), Some(2), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[E_"), "{err}");
    err
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json")).unwrap()).unwrap()
}

fn counts(m: &serde_json::Value, key: &str) -> Vec<u64> {
    m[key].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect()
}

#[test]
fn synthetic_counts_follow_the_profile() {
    let root = tempfile::tempdir().unwrap();
    ok(&["data", "--synthetic", "--classes", "10", "--rho", "50", "--out", "d"], root.path());
    let m = manifest(&root.path().join("d"));
    let expected: Vec<u64> = (0..10)
        .map(|i| (1000.0 * (1.0f64 / 50.0).powf(i as f64 / 9.0)).round() as u64)
        .collect();
    assert_eq!(counts(&m, "train_counts"), expected);
    assert_eq!(expected[9], 20);
    assert_eq!(counts(&m, "val_counts"), vec![100; 10]);
}

#[test]
fn rho_one_is_balanced() {
    let root = tempfile::tempdir().unwrap();
    ok(&["data", "--rho", "1", "--classes", "4", "--n-max", "30", "--val-size", "8", "--out", "d"], root.path());
    assert_eq!(counts(&manifest(&root.path().join("d")), "train_counts"), vec![30; 4]);
}

#[test]
fn invalid_rho_names_the_flag() {
    let root = tempfile::tempdir().unwrap();
    let err = fails(&["data", "--rho", "0.5"], root.path());
    assert!(err.contains("--rho"), "{err}");
    assert!(!root.path().join("data").exists());
}

#[test]
fn help_exits_zero() {
    let root = tempfile::tempdir().unwrap();
    assert!(ok(&["--help"], root.path()).contains("verify"));
}

#[test]
fn unknown_command_is_usage_error() {
    let root = tempfile::tempdir().unwrap();
    assert!(fails(&["frobnicate"], root.path()).starts_with("error[E_USAGE]"));
}

#[test]
fn verify_data_reports_endpoints() {
    let root = tempfile::tempdir().unwrap();
    let out = ok(&["verify", "data", "--rho", "100"], root.path());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["passed"], true);
    let checks = v["reports"][0]["checks"].as_array().unwrap();
    let detail = |name: &str| {
        checks.iter().find(|c| c["name"] == name).unwrap()["detail"].as_str().unwrap().to_string()
    };
    assert!(detail("first_count").starts_with("5000 "));
    assert!(detail("last_count").starts_with("50 "));
}

#[test]
fn verify_hypergrad_single_window_length() {
    let root = tempfile::tempdir().unwrap();
    let out = ok(&["verify", "hypergrad", "--k", "3", "--out", "r.json"], root.path());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["passed"], true);
    let names: Vec<&str> = v["reports"][0]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"k3_explicit_vs_fd"));
    assert!(!names.iter().any(|n| n.starts_with("k5")));
    assert_eq!(std::fs::read_to_string(root.path().join("r.json")).unwrap().trim(), out.trim());
}

fn small_dataset(root: &Path, extra: &[&str]) {
    let mut args = vec![
        "data", "--classes", "3", "--dim", "4", "--n-max", "40", "--rho", "4", "--val-size", "12",
        "--test-per-class", "20", "--out", "d",
    ];
    args.extend(extra);
    ok(&args, root);
}

fn train_teacher(root: &Path) {
    ok(&["train", "--method", "ce", "--role", "teacher", "--dataset", "d", "--epochs", "3", "--out", "t"], root);
}

#[test]
fn distillation_without_teacher_fails_cleanly() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    let err = fails(&["train", "--method", "bikd", "--dataset", "d"], root.path());
    assert!(err.contains("teacher"), "{err}");
    let err = fails(&["train", "--method", "kd", "--dataset", "d", "--teacher", "absent"], root.path());
    assert!(err.contains("missing teacher checkpoint"), "{err}");
}

#[test]
fn bad_config_is_rejected_before_training() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    std::fs::write(root.path().join("c.toml"), "method = \"ce\"\ndataset = \"d\"\nbatchsize = 3\n").unwrap();
    let err = fails(&["train", "--config", "c.toml"], root.path());
    assert!(err.starts_with("error[E_CONFIG]") && err.contains("batchsize"), "{err}");
    fails(&["train", "--method", "ce", "--dataset", "d", "--k", "0"], root.path());
    fails(&["train", "--method", "ce", "--dataset", "d", "--set", "train.momentum=-1"], root.path());
    assert!(!root.path().join("runs").exists());
}

#[test]
fn flags_override_config_and_land_in_manifest() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    train_teacher(root.path());
    std::fs::write(
        root.path().join("c.toml"),
        "method = \"kd\"\ndataset = \"d\"\nteacher = \"t\"\noutput = \"kd\"\n[train]\nepochs = 2\nalpha = 0.3\nbatch_size = 16\n",
    )
    .unwrap();
    ok(&["train", "--config", "c.toml", "--alpha", "0.7", "--set", "train.tau=2.0"], root.path());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.path().join("kd/seed-0/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["train"]["alpha"], 0.7);
    assert_eq!(m["config"]["train"]["tau"], 2.0);
    assert_eq!(m["config"]["train"]["batch_size"], 16);
    assert_eq!(m["config"]["train"]["eta_theta"], 0.1);
    assert_eq!(m["label"], "kd(alpha=0.7)");
    let log = std::fs::read_to_string(root.path().join("kd/seed-0/runlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
}

#[test]
fn perfect_toy_model_scores_full_accuracy() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &["--separation", "50", "--scale", "0.1"]);
    ok(&["train", "--method", "ce", "--dataset", "d", "--epochs", "5", "--out", "ce"], root.path());
    ok(&["eval", "ce"], root.path());
    let metrics = std::fs::read_to_string(root.path().join("ce/seed-0/metrics.csv")).unwrap();
    assert!(metrics.contains("\naccuracy,1\n"), "{metrics}");
    let confusion = std::fs::read_to_string(root.path().join("ce/seed-0/confusion.csv")).unwrap();
    assert_eq!(confusion, "true,pred_0,pred_1,pred_2\n0,20,0,0\n1,0,20,0\n2,0,0,20\n");
}

#[test]
fn eval_is_reproducible_and_matches_the_runlog() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    train_teacher(root.path());
    ok(&["train", "--method", "bikd", "--dataset", "d", "--teacher", "t", "--epochs", "3", "--out", "b"], root.path());
    let run = root.path().join("b/seed-0");
    ok(&["eval", "b/seed-0"], root.path());
    let first = std::fs::read(run.join("metrics.csv")).unwrap();
    ok(&["eval", "b"], root.path());
    assert_eq!(first, std::fs::read(run.join("metrics.csv")).unwrap());
    let log = std::fs::read_to_string(run.join("runlog.csv")).unwrap();
    let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
    let last: Vec<&str> = log.lines().last().unwrap().split(',').collect();
    let metrics = String::from_utf8(first).unwrap();
    for (name, value) in header.iter().zip(&last).filter(|(n, _)| n.starts_with("acc_")) {
        let from_eval = metrics.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        let a: f64 = from_eval.split(',').nth(1).unwrap().parse().unwrap();
        let b: f64 = value.parse().unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "{name}");
    }
}

#[test]
fn comparison_table_lists_each_method() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    train_teacher(root.path());
    for m in ["kd", "bikd"] {
        ok(&["train", "--method", m, "--dataset", "d", "--teacher", "t", "--epochs", "2", "--seed", "0", "--seed", "1", "--out", m], root.path());
    }
    ok(&["eval", "kd", "bikd", "--out", "cmp.csv"], root.path());
    let table = std::fs::read_to_string(root.path().join("cmp.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,runs,accuracy,head_accuracy,tail_accuracy,tail3_accuracy");
    assert!(lines[1].starts_with("kd(alpha=0.5),2,"));
    assert!(lines[2].starts_with("bikd(k=5),2,"));
}

#[test]
fn export_covers_the_training_set() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    train_teacher(root.path());
    ok(&["train", "--method", "bikd", "--dataset", "d", "--teacher", "t", "--epochs", "1", "--out", "b"], root.path());
    ok(&["export", "b/seed-0"], root.path());
    let csv = std::fs::read_to_string(root.path().join("b/seed-0/weight_scatter.csv")).unwrap();
    let train: u64 = counts(&manifest(&root.path().join("d")), "train_counts").iter().sum();
    assert_eq!(csv.lines().next().unwrap(), "ce_teacher,ce_student,w_hard,w_soft,class");
    assert_eq!(csv.lines().count() as u64, train + 1);
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[0] >= 0.0 && v[1] >= 0.0);
        assert!((0.0..=1.0).contains(&v[2]) && (0.0..=1.0).contains(&v[3]));
    }
}

#[test]
fn incomplete_run_names_missing_artifact() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    ok(&["train", "--method", "ce", "--dataset", "d", "--epochs", "1", "--out", "c"], root.path());
    std::fs::remove_file(root.path().join("c/seed-0/model.bin")).unwrap();
    let err = fails(&["eval", "c/seed-0"], root.path());
    assert!(err.contains("missing artifact") && err.contains("model.bin"), "{err}");
    let err = fails(&["export", "c/seed-0"], root.path());
    assert!(err.contains("model.bin"), "{err}");
}

#[test]
fn alpha_sweep_writes_nine_runs() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    train_teacher(root.path());
    ok(&["train", "--method", "kd", "--dataset", "d", "--teacher", "t", "--epochs", "1", "--alpha-sweep", "--out", "sweep"], root.path());
    for i in 1..=9 {
        let dir = root.path().join(format!("sweep/alpha-{}/seed-0", i as f64 / 10.0));
        assert!(dir.join("manifest.json").exists(), "{}", dir.display());
    }
    fails(&["train", "--method", "bikd", "--dataset", "d", "--teacher", "t", "--alpha-sweep"], root.path());
}

#[test]
fn double_precision_run() {
    let root = tempfile::tempdir().unwrap();
    small_dataset(root.path(), &[]);
    ok(&["train", "--method", "ce", "--role", "teacher", "--precision", "f64", "--dataset", "d", "--epochs", "1", "--out", "t64"], root.path());
    ok(&["train", "--method", "bikd", "--precision", "f64", "--dataset", "d", "--teacher", "t64", "--epochs", "1", "--out", "b64"], root.path());
    let m = std::fs::read_to_string(root.path().join("b64/seed-0/model.json")).unwrap();
    assert!(m.contains("f64"));
    train_teacher(root.path());
    let err = fails(&["train", "--method", "kd", "--precision", "f64", "--dataset", "d", "--teacher", "t", "--epochs", "1"], root.path());
    assert!(err.contains("dtype"), "{err}");
}

#[test]
fn closed_stdout_is_not_a_crash() {
    let root = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_bikd"))
        .args(["verify", "data"])
        .env("BIKD_OUTPUT_ROOT", root.path())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    drop(child.stdout.take());
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
