use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medctx_cli::config::RunConfig;
use medctx_cli::eval::EvalSummary;

const SMALL: [&str; 4] = ["--set", "data.n_train=3", "--set", "data.n_test=2"];

fn medctx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medctx")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = medctx(args);
    assert!(out.status.success(), "medctx {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    let mut args = vec!["generate-data", "--out", s(&data)];
    args.extend(SMALL);
    ok(&args);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--steps", "4", "--log-every", "0"];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
}

#[test]
fn default_generation_writes_thirty_cases_listed_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&["generate-data", "--out", s(&out)]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let ids: Vec<&str> = manifest["ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(ids.len(), 30);
    assert_eq!(manifest["train"].as_array().unwrap().len(), 25);
    assert_eq!(manifest["test"].as_array().unwrap().len(), 5);
    let mut files: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.retain(|f| f.ends_with(".mcvx"));
    assert_eq!(files.len(), 60);
    for id in ids {
        assert!(files.contains(&format!("{id}.image.mcvx")) && files.contains(&format!("{id}.label.mcvx")), "{id}");
    }
}

#[test]
fn run_directory_records_config_seed_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &["--seed", "42"]);
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.starts_with(&format!("# {}", medctx_cli::VERSION)));
    let cfg = RunConfig::from_file(&run.join("config.txt")).unwrap();
    assert_eq!(cfg.train.seed, 42);
    assert_eq!(cfg.train.mask_ratio, 0.4);
    assert_eq!(cfg.data.n_train, 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["version"], medctx_cli::VERSION);
    assert_eq!(summary["seed"], 42);
    assert!(!run.join("FAILED").exists());
}

#[test]
fn baseline_logs_zero_masked_and_consistency_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &["--baseline"]);
    let text = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!((r[3], r[4]), ("0", "0"));
        assert_eq!(r[1], r[2], "total equals the supervised term");
    }
}

#[test]
fn flags_override_set_which_overrides_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let file = tmp.path().join("run.cfg");
    fs::write(&file, "# fewer steps\ntrain.steps = 9\ntrain.mask_ratio = 0.6\nloss.beta = 0.5\n").unwrap();
    let run = tmp.path().join("run");
    train(&data, &run, &["--config", s(&file), "--set", "train.mask_ratio=0.7", "--beta", "0.25"]);
    let cfg = RunConfig::from_file(&run.join("config.txt")).unwrap();
    // --steps 4 from the helper beats the file's 9
    assert_eq!(cfg.train.steps, 4);
    assert_eq!(cfg.train.mask_ratio, 0.7);
    assert_eq!(cfg.train.loss.beta, 0.25);
}

#[test]
fn bad_config_fails_before_training_and_leaves_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--set", "train.lr=-1"];
    args.extend(SMALL);
    let out = medctx(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning rate"));
    assert!(run.join("FAILED").exists());
    assert!(!run.join("metrics.csv").exists());

    let out = medctx(&["train", "--data", s(&data), "--out", s(&run), "--set", "train.nonsense=1"]);
    assert!(!out.status.success());

    // a later successful run clears the marker
    train(&data, &run, &[]);
    assert!(!run.join("FAILED").exists());
}

#[test]
fn missing_dataset_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = medctx(&["train", "--data", s(&tmp.path().join("nowhere")), "--out", s(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
    assert!(run.join("FAILED").exists());
}

fn csv_mean(path: &Path) -> f64 {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let present: Vec<f64> = rows.iter().filter(|r| &r[2] == "true").map(|r| r[3].parse().unwrap()).collect();
    present.iter().sum::<f64>() / present.len() as f64
}

#[test]
fn ground_truth_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let out = tmp.path().join("gt");
    ok(&["eval", "--ground-truth", "--data", s(&data), "--split", "all", "--out", s(&out)]);
    let mut reader = csv::Reader::from_path(out.join("eval-ground-truth-all.csv")).unwrap();
    let mut n = 0;
    for r in reader.records() {
        let r = r.unwrap();
        if &r[2] == "true" {
            assert_eq!(r[3].parse::<f64>().unwrap(), 1.0);
            assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn student_and_teacher_evaluate_from_one_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let ckpt = run.join("checkpoint.mctx");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--use-teacher"]);
    for who in ["student", "teacher"] {
        let json: EvalSummary = serde_json::from_str(&fs::read_to_string(run.join(format!("eval-{who}-test.json"))).unwrap()).unwrap();
        assert_eq!(json.cases, 2);
        let mean = json.mean_dsc.unwrap();
        assert!((mean - csv_mean(&run.join(format!("eval-{who}-test.csv")))).abs() < 1e-12);
    }
    let student: EvalSummary = serde_json::from_str(&fs::read_to_string(run.join("eval-student-test.json")).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["test"]["mean_dsc"].as_f64(), student.mean_dsc);
}

#[test]
fn eval_rejects_volumes_the_model_cannot_read() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let other = tmp.path().join("other");
    ok(&["generate-data", "--out", s(&other), "--set", "data.dims=40,40,40", "--set", "net.depth=1", "--set", "data.n_train=1", "--set", "data.n_test=1"]);
    let out = medctx(&["eval", "--checkpoint", s(&run.join("checkpoint.mctx")), "--data", s(&other)]);
    assert!(!out.status.success());
    assert!(run.join("FAILED").exists());
}

#[test]
fn empty_sweep_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let out = medctx(&["ablate", "--data", s(&data), "--out", s(&tmp.path().join("abl")), "--sweep", ""]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn beta_sweep_keeps_everything_else_fixed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let out = tmp.path().join("abl");
    let mut args = vec!["ablate", "--data", s(&data), "--out", s(&out), "--sweep", "beta", "--betas", "0.5,2", "--seeds", "3", "--steps", "2"];
    args.extend(SMALL);
    let table = ok(&args);
    assert!(table.contains("| 0.5 |") && table.contains("| 2 |"), "{table}");
    let a = RunConfig::from_file(&out.join("cells/beta-0.5/seed-3/config.txt")).unwrap();
    let mut b = RunConfig::from_file(&out.join("cells/beta-2/seed-3/config.txt")).unwrap();
    assert_eq!((a.train.loss.beta, b.train.loss.beta), (0.5, 2.0));
    b.train.loss.beta = 0.5;
    assert_eq!(a, b);

    // a rerun reuses the finished cells
    let before = fs::metadata(out.join("cells/beta-2/seed-3/checkpoint.mctx")).unwrap().modified().unwrap();
    ok(&args);
    let after = fs::metadata(out.join("cells/beta-2/seed-3/checkpoint.mctx")).unwrap().modified().unwrap();
    assert_eq!(before, after);
}

#[test]
fn grad_check_reports_each_case_and_fails_on_an_injected_bug() {
    let report = ok(&["grad-check", "--seeds", "1"]);
    for case in medctx_core::gradsuite::CASES {
        assert!(report.lines().any(|l| l.split_whitespace().next() == Some(case) && l.ends_with("ok")), "{case} missing:\n{report}");
    }
    let out = medctx(&["grad-check", "--seeds", "1", "--inject-bug"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
