use super::*;
use crate::annotation::{Annotator, AnnotatorConfig};
use crate::envs::EnvConfig;
use crate::lapp_loop::{LoopConfig, LoopState};
use crate::preference::PredictorConfig;
use crate::rl::PPOConfig;
use crate::trainer::TrainerConfig;

fn small(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        env: EnvConfig::point_mass(),
        predictor: PredictorConfig {
            width: 8,
            heads: 2,
            blocks: 1,
            ..PredictorConfig::default()
        },
        trainer: TrainerConfig {
            pool_size: 2,
            selected: 1,
            min_epochs: 1,
            max_epochs: 2,
            ..TrainerConfig::default()
        },
        ppo: PPOConfig {
            hidden: vec![8],
            ..PPOConfig::default()
        },
        run: LoopConfig {
            epochs: 6,
            update_interval: 2,
            pairs_per_epoch: 5,
            num_envs: 3,
            steps_per_epoch: 20,
            dataset_size: 20,
            segment_len: 6,
            eval_interval: 2,
            eval_envs: 1,
            eval_steps: 10,
            ..LoopConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn empty_and_seed_only_configs_take_defaults() {
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    let c = RunConfig::from_toml("seed = 42\n").unwrap();
    assert_eq!(c.seed, 42);
    assert_eq!(c.ppo, PPOConfig::default());
    assert_eq!(c.run.update_interval, 50);
    assert_eq!(c.annotator.samples_per_pair, 15);
}

#[test]
fn misspelled_keys_are_named() {
    let err = RunConfig::from_toml("seed = 1\n[ppo]\ngamam = 0.9\n").unwrap_err().to_string();
    assert!(err.contains("gamam"), "{err}");
    assert!(err.contains("line 3"), "{err}");
    let err = RunConfig::from_toml("[lop]\nepochs = 3\n").unwrap_err().to_string();
    assert!(err.contains("lop"), "{err}");
}

#[test]
fn type_errors_and_versions_are_rejected() {
    assert!(RunConfig::from_toml("seed = \"x\"").is_err());
    assert!(matches!(
        RunConfig::from_toml("version = 9"),
        Err(IoError::Version { found: 9, .. })
    ));
    assert!(RunConfig::from_toml("[ppo]\ngamma = 2.0").is_err());
}

#[test]
fn config_round_trips() {
    let c = small(3);
    let text = c.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    std::fs::write(&p, &text).unwrap();
    assert_eq!(load_config(&p).unwrap(), c);
    assert!(matches!(load_config(&dir.path().join("nope.toml")), Err(IoError::File { .. })));
}

fn sample_checkpoint() -> Checkpoint {
    let mut c = Checkpoint::new();
    c.put_array("w", vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 0.1]).unwrap();
    c.put_vector("nan", vec![f64::NAN, f64::INFINITY]);
    c.put_vector("empty", Vec::new());
    c.put_text("meta", "{\"a\": 1}".into());
    c
}

fn bits(c: &Checkpoint) -> Vec<(String, Vec<u64>)> {
    c.entries
        .iter()
        .map(|(k, e)| match e {
            Entry::Array { data, .. } => (k.clone(), data.iter().map(|v| v.to_bits()).collect()),
            Entry::Text(t) => (k.clone(), t.bytes().map(u64::from).collect()),
        })
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    save_checkpoint(&p, &c).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(bits(&back), bits(&c));
    assert_eq!(back.array("w").unwrap().0, &[2, 3]);
    let mut other = Checkpoint::new();
    assert!(other.put_array("bad", vec![2], vec![1.0]).is_err());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = sample_checkpoint().to_bytes();
    for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(IoError::Checksum { .. })));
    }
    assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(IoError::Truncated)));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(IoError::Checksum { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(IoError::BadMagic)));
}

fn reseal(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

#[test]
fn version_and_byte_order_are_checked() {
    let bytes = sample_checkpoint().to_bytes();
    let body = bytes[..bytes.len() - 4].to_vec();
    let mut v = body.clone();
    v[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&reseal(v)), Err(IoError::Version { found: 7, .. })));
    let mut e = body;
    e[12..16].copy_from_slice(&0x0102_0304u32.to_be_bytes());
    assert!(matches!(Checkpoint::from_bytes(&reseal(e)), Err(IoError::Endianness)));
}

#[test]
fn loop_state_round_trips() {
    let oracle = Annotator::from_config(&AnnotatorConfig::default()).unwrap();
    let mut s = LoopState::new(small(2)).unwrap();
    s.bootstrap(&oracle).unwrap();
    s.run_epoch(Some(&oracle)).unwrap();
    let c1 = state_to_checkpoint(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("state.ckpt");
    save_state(&p, &s).unwrap();
    let back = load_state(&p).unwrap();
    let c2 = state_to_checkpoint(&back).unwrap();
    assert_eq!(bits(&c1), bits(&c2));
    assert_eq!(back.envs, s.envs);
    assert_eq!(back.buffer, s.buffer);
    assert_eq!(back.dataset, s.dataset);
}

#[test]
fn resume_continues_the_metrics_stream() {
    let oracle = Annotator::from_config(&AnnotatorConfig::default()).unwrap();
    let mut full = LoopState::new(small(9)).unwrap();
    full.bootstrap(&oracle).unwrap();
    let mut resumed = full.clone();
    let mut rows = Vec::new();
    full.run(Some(&oracle), |r, _| {
        rows.push(serde_json::to_string(r).unwrap());
        Ok(())
    })
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mid.ckpt");
    for _ in 0..3 {
        resumed.run_epoch(Some(&oracle)).unwrap();
    }
    save_state(&p, &resumed).unwrap();
    let mut back = load_state(&p).unwrap();
    let mut tail = Vec::new();
    back.run(Some(&oracle), |r, _| {
        tail.push(serde_json::to_string(r).unwrap());
        Ok(())
    })
    .unwrap();
    assert_eq!(tail, rows[3..]);
}

#[test]
fn metrics_writer_files() {
    let dir = tempfile::tempdir().unwrap();
    let row = |e: u64, x: Option<f64>| serde_json::json!({"epoch": e, "loss": 0.5 + e as f64, "extra": x});
    {
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        w.write(&row(0, None)).unwrap();
        w.write(&row(1, Some(2.0))).unwrap();
        w.write(&row(2, None)).unwrap();
        assert!(w.write(&row(2, None)).is_err());
        assert!(w.write(&serde_json::json!({"epoch": 5})).is_err());
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, "epoch,extra,loss\n0,,0.5\n1,2.0,1.5\n2,,2.5\n");
    {
        let mut w = MetricsWriter::resume(dir.path(), 2).unwrap();
        w.write(&row(2, Some(1.0))).unwrap();
    }
    let lines: Vec<serde_json::Value> = read_jsonl(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["extra"], 1.0);
}

#[test]
fn jsonl_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.jsonl");
    let recs = vec![serde_json::json!({"a": 0.1}), serde_json::json!({"a": 1e-300})];
    write_jsonl(&p, &recs).unwrap();
    let back: Vec<serde_json::Value> = read_jsonl(&p).unwrap();
    assert_eq!(back, recs);
    std::fs::write(&p, "{\"a\": 1}\n\nnot json\n").unwrap();
    match read_jsonl::<serde_json::Value>(&p) {
        Err(IoError::Jsonl { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let a = DirLock::acquire(dir.path()).unwrap();
    assert!(matches!(DirLock::acquire(dir.path()), Err(IoError::Locked(_))));
    drop(a);
    assert!(DirLock::acquire(dir.path()).is_ok());
}
