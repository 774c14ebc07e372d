use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[env]
kind = "gait_walker"
episode_length = 40
[predictor]
width = 8
heads = 2
blocks = 1
[trainer]
pool_size = 2
selected = 1
min_epochs = 1
max_epochs = 2
[ppo]
hidden = [16]
[loop]
epochs = 6
update_interval = 2
pairs_per_epoch = 5
num_envs = 3
steps_per_epoch = 20
dataset_size = 20
segment_len = 6
eval_interval = 3
eval_envs = 2
eval_steps = 20
"#;

fn prefrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefrl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), format!("{TINY}{extra}")).unwrap();
    dir
}

#[test]
fn eval_on_a_fresh_policy_prints_metrics() {
    let dir = setup("");
    let text = ok(prefrl(dir.path(), &["--config", "run.toml", "eval"]));
    for key in ["tracking_error ", "sync_error ", "cadence ", "mean_reward "] {
        assert!(text.contains(key), "{text}");
    }
}

#[test]
fn replay_annotation_is_deterministic() {
    let dir = setup("");
    let d = dir.path();
    ok(prefrl(d, &["--config", "run.toml", "--out-dir", "seg", "export-segments", "--count", "6"]));
    ok(prefrl(d, &["--config", "run.toml", "--out-dir", "oracle", "annotate", "--pairs", "seg/pairs.jsonl"]));
    for out in ["r1", "r2"] {
        ok(prefrl(
            d,
            &[
                "--config",
                "run.toml",
                "--out-dir",
                out,
                "--annotator",
                "replay",
                "--replay",
                "oracle/labels.jsonl",
                "annotate",
                "--pairs",
                "seg/pairs.jsonl",
            ],
        ));
    }
    let a = std::fs::read(d.join("r1/labels.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("r2/labels.jsonl")).unwrap());
    assert_eq!(a, std::fs::read(d.join("oracle/labels.jsonl")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);
}

const PREFERENCE_COLUMNS: [&str; 12] = [
    "mean_pref_reward",
    "buffer_pairs",
    "dataset_size",
    "predictor_updated",
    "annotated",
    "labeled",
    "discarded",
    "label_0",
    "label_1",
    "label_2",
    "label_3",
    "predictor_validation_loss",
];

fn policy_rows(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let m = v.as_object_mut().unwrap();
            for k in PREFERENCE_COLUMNS {
                m.remove(k);
            }
            v
        })
        .collect()
}

#[test]
fn baseline_matches_a_frozen_zero_head_predictor() {
    let dir = setup("");
    let d = dir.path();
    ok(prefrl(d, &["--config", "run.toml", "--out-dir", "base", "train", "--baseline"]));
    let frozen = TINY.replace("max_epochs = 2", "max_epochs = 2\nlearning_rate = 0.0");
    std::fs::write(d.join("frozen.toml"), frozen).unwrap();
    ok(prefrl(d, &["--config", "frozen.toml", "--out-dir", "zero", "train"]));
    let base = policy_rows(&d.join("base/metrics.jsonl"));
    assert_eq!(base.len(), 6);
    assert_eq!(base, policy_rows(&d.join("zero/metrics.jsonl")));
}

#[test]
fn interrupted_training_resumes_to_the_same_metrics() {
    let dir = setup("");
    let d = dir.path();
    ok(prefrl(d, &["--config", "run.toml", "--out-dir", "full", "train"]));
    ok(prefrl(d, &["--config", "run.toml", "--out-dir", "cut", "train", "--epochs", "3"]));
    let refused = prefrl(d, &["--config", "run.toml", "--out-dir", "cut", "train"]);
    assert!(!refused.status.success());
    ok(prefrl(d, &["--out-dir", "cut", "train", "--resume", "--epochs", "6"]));
    assert_eq!(
        std::fs::read(d.join("full/metrics.jsonl")).unwrap(),
        std::fs::read(d.join("cut/metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.join("full/metrics.csv")).unwrap(),
        std::fs::read(d.join("cut/metrics.csv")).unwrap()
    );
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let dir = setup("");
    let d = dir.path();
    std::fs::write(d.join("typo.toml"), "[ppo]\ngamam = 0.9\n").unwrap();
    let out = prefrl(d, &["--config", "typo.toml", "eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamam"));

    let out = prefrl(d, &["--config", "run.toml", "--annotator", "replay", "annotate", "--pairs", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay_path"));

    let out = prefrl(d, &["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn a_locked_output_directory_is_refused() {
    let dir = setup("");
    let d = dir.path();
    std::fs::create_dir(d.join("busy")).unwrap();
    std::fs::write(d.join("busy/.prefrl.lock"), "").unwrap();
    let out = prefrl(d, &["--config", "run.toml", "--out-dir", "busy", "train", "--baseline"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("busy/metrics.jsonl").exists());
}

#[test]
fn predictor_training_and_transfer_run_from_files() {
    let dir = setup("");
    let d = dir.path();
    ok(prefrl(d, &["--config", "run.toml", "--out-dir", "boot", "bootstrap"]));
    ok(prefrl(d, &["--config", "run.toml", "--out-dir", "pred", "train-predictor", "--dataset", "boot/dataset.jsonl"]));
    let curves = std::fs::read_to_string(d.join("pred/curves.csv")).unwrap();
    assert!(curves.starts_with("member,epoch,train_loss,validation_loss"));
    assert!(d.join("pred/predictor.ckpt").exists());

    ok(prefrl(d, &["--config", "run.toml", "--out-dir", "src", "train", "--baseline", "--epochs", "2"]));
    std::fs::write(d.join("target.toml"), TINY.replace("episode_length = 40", "episode_length = 40\ndrag = 1.5")).unwrap();
    ok(prefrl(d, &["--config", "target.toml", "--out-dir", "dst", "transfer", "--checkpoint", "src/checkpoint.ckpt", "--epochs", "2"]));
    assert_eq!(std::fs::read_to_string(d.join("dst/metrics.jsonl")).unwrap().lines().count(), 2);
    let text = ok(prefrl(d, &["--config", "target.toml", "eval", "--checkpoint", "dst/checkpoint.ckpt"]));
    assert!(text.contains("tracking_error"));
}
