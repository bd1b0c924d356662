//! End-to-end runs of the `readood` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
schema_version = 1
variant = "read-ed"
seed = 5

[data]
image_size = 16
train_per_class = 10
val_per_class = 6
test_per_class = 8
ood_per_suite = 24

[classifier.train]
epochs = 2
batch_size = 16

[autoencoder.train]
epochs = 2
batch_size = 16

[calibration]
grid = [0.0, 0.002]
max_pool_per_kind = 16
"#;

const STAGES: [&str; 6] = ["gen-data", "train-clf", "train-ae", "fit-stats", "calibrate", "evaluate"];

fn readood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_readood")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, CONFIG).unwrap();
    path
}

fn run_stage(config: &Path, stage: &str) {
    let out = readood(&[stage, "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{stage} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn full_pipeline(dir: &Path) -> PathBuf {
    let config = write_config(dir);
    for stage in STAGES {
        run_stage(&config, stage);
    }
    config
}

#[test]
fn pipeline_is_reproducible_and_scores_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = full_pipeline(a.path());
    full_pipeline(b.path());
    let report = |d: &Path| fs::read_to_string(d.join("work/report.json")).unwrap();
    assert_eq!(report(a.path()), report(b.path()));
    assert!(a.path().join("work/report.csv").exists());
    assert!(a.path().join("work/score_histogram.dat").exists());

    let scores = a.path().join("scores.csv");
    let out = readood(&[
        "score",
        "--config",
        config.to_str().unwrap(),
        "--input",
        a.path().join("data/ood_hard.rtn").to_str().unwrap(),
        "--output",
        scores.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&scores).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sample_id,score_cla,score_rec_raw,complexity,lambda,final_score,verdict,predicted_class"
    );
    assert_eq!(lines.count(), 24);

    let out = readood(&["inspect-ckpt", a.path().join("work/detector.rck").to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for field in ["format version: 1", "kind: detector", "variant: read-ed", "epsilon:", "tau:"] {
        assert!(text.contains(field), "inspect output lacks {field:?}:\n{text}");
    }

    let empty = a.path().join("empty.rtn");
    let t = readood::AnyTensor::F32(readood::Tensor::zeros(&[0, 3, 16, 16]));
    readood::io::tensor_file::write(&empty, &t).unwrap();
    let out = readood(&["score", "--config", config.to_str().unwrap(), "--input", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_stage_names_the_subcommand_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    run_stage(&config, "gen-data");
    let out = readood(&["fit-stats", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run `train-clf` first"), "{err}");
}

#[test]
fn invalid_override_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = readood(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--set",
        "classifier.train.momentum=2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classifier.train.momentum (set by --set)"));
}
