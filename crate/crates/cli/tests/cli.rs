use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scanformer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scanformer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_line_error(o: &Output) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

/// A `simple` split trimmed to a handful of examples.
fn tiny_data(dir: &Path) {
    let o = scanformer(&["gen-data", "--split", "simple", "--out", "full"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::create_dir_all(dir.join("data")).unwrap();
    for (part, n) in [("train", 12), ("test", 4)] {
        let text = fs::read_to_string(dir.join(format!("full/simple.{part}.txt"))).unwrap();
        let lines: Vec<&str> = text.lines().step_by(331).take(n).collect();
        fs::write(dir.join(format!("data/simple.{part}.txt")), lines.join("\n") + "\n").unwrap();
    }
}

const TINY: &[&str] = &[
    "--data", "data", "--split", "simple", "--layers", "1", "--heads", "2", "--embed-dim", "8", "--ffn-dim", "16", "--epochs", "1",
    "--batch-size", "4",
];

#[test]
fn gen_data_writes_jump_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = scanformer(&["gen-data", "--split", "jump", "--out", "d/"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let train = fs::read_to_string(dir.path().join("d/jump.train.txt")).unwrap();
    let test = fs::read_to_string(dir.path().join("d/jump.test.txt")).unwrap();
    assert_eq!(train.lines().count() + test.lines().count(), 20_910);
    assert!(test.lines().all(|l| l.contains("jump")));
}

#[test]
fn unknown_flag_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = scanformer(&["train", "--no-such-flag"], dir.path());
    assert_one_line_error(&o);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_writes_no_report() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let o = scanformer(
        &["eval", "--checkpoint", "nope.ckpt", "--data", "data", "--split", "simple", "--out", "rep"],
        dir.path(),
    );
    assert_one_line_error(&o);
    assert!(stderr(&o).contains("nope.ckpt"));
    assert!(!dir.path().join("rep/report.json").exists());
}

#[test]
fn config_file_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    fs::write(dir.path().join("c.json"), r#"{"model": {"layers": 1, "lyaers": 2}}"#).unwrap();
    let mut args = vec!["train", "--config", "c.json"];
    args.extend_from_slice(TINY);
    let o = scanformer(&args, dir.path());
    assert_one_line_error(&o);
    assert!(stderr(&o).contains("lyaers"), "{}", stderr(&o));
}

#[test]
fn sag_t5_train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let mut args = vec!["train", "--variant", "sag_t5", "--span", "4", "--seed", "2"];
    args.extend_from_slice(TINY);
    let o = scanformer(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let run = dir.path().join("runs").join(summary["config_hash"].as_str().unwrap()).join("2");
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["model"]["variant"], "sag_t5");
    assert_eq!(config["model"]["span"], 4);
    assert_eq!(config["model"]["beta0_encoder"], -1.0);
    assert_eq!(config["model"]["beta0_decoder"], -1.0);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    assert!(record["test_accuracy"].is_number());

    let ckpt = run.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let o = scanformer(
        &["eval", "--checkpoint", ckpt, "--data", "data", "--split", "simple", "--out", "rep"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([2]));
    assert!(report["sem"].is_null());
    assert_eq!(fs::read_to_string(dir.path().join("rep/predictions.2.txt")).unwrap().lines().count(), 4);

    let o = scanformer(&["export-bias", "--checkpoint", ckpt, "--out", "bias"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("bias/encoder.layer0.txt").is_file());
    assert!(dir.path().join("bias/decoder.layer0.txt").is_file());
}

#[test]
fn grad_check_reports_success() {
    let dir = tempfile::tempdir().unwrap();
    let o = scanformer(
        &["grad-check", "--variant", "sag_conv", "--layers", "1", "--heads", "2", "--embed-dim", "8", "--ffn-dim", "8"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
}
