use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_checkpoint, save_checkpoint, Checkpoint, IoError, RunConfig};
use crate::annotation::{LabelTally, SegmentPair};
use crate::lapp_loop::LoopState;
use crate::numerics::{Adam, AdamConfig, DenseArray, Module};
use crate::preference::{FeatureStats, PredictorConfig, PreferenceTriple, RewardPredictor};
use crate::rl::{PolicyBundle, RunningNorm};
use crate::seeding::rng_from_seed;
use crate::trainer::EnsemblePredictor;

#[derive(Serialize, Deserialize)]
struct SlotMeta {
    episode_index: u64,
    episode_step: usize,
}

#[derive(Serialize, Deserialize)]
struct PredictorMeta {
    config: PredictorConfig,
    validation_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    cycles: usize,
    tally: LabelTally,
    slots: Vec<SlotMeta>,
    predictor: Option<PredictorMeta>,
}

fn json<T: Serialize>(v: &T) -> Result<String, IoError> {
    serde_json::to_string(v).map_err(|e| IoError::Entry(e.to_string()))
}

fn parse<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint, name: &str) -> Result<T, IoError> {
    serde_json::from_str(ckpt.text(name)?).map_err(|e| IoError::Entry(format!("{name}: {e}")))
}

fn put_module(ckpt: &mut Checkpoint, prefix: &str, module: &dyn Module) -> Result<(), IoError> {
    let mut err = None;
    module.visit_params(&mut |p| {
        let v = p.value();
        if let Err(e) = ckpt.put_array(format!("{prefix}/{}", p.name()), v.shape().to_vec(), v.data().to_vec()) {
            err.get_or_insert(e);
        }
    });
    err.map_or(Ok(()), Err)
}

fn load_module(ckpt: &Checkpoint, prefix: &str, module: &mut dyn Module) -> Result<(), IoError> {
    let mut err = None;
    module.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let name = format!("{prefix}/{}", p.name());
        let result = ckpt.array(&name).and_then(|(shape, data)| {
            let value = DenseArray::new(shape.to_vec(), data.to_vec()).map_err(|e| IoError::Restore(e.to_string()))?;
            p.set_value(value).map_err(|e| IoError::Restore(format!("{name}: {e}")))
        });
        if let Err(e) = result {
            err = Some(e);
        }
    });
    err.map_or(Ok(()), Err)
}

fn put_norm(ckpt: &mut Checkpoint, prefix: &str, n: &RunningNorm) {
    ckpt.put_vector(format!("{prefix}/count"), vec![n.count]);
    ckpt.put_vector(format!("{prefix}/mean"), n.mean.clone());
    ckpt.put_vector(format!("{prefix}/var"), n.var.clone());
}

fn load_norm(ckpt: &Checkpoint, prefix: &str, dim: usize) -> Result<RunningNorm, IoError> {
    let count = ckpt.vector(&format!("{prefix}/count"))?;
    let mean = ckpt.vector(&format!("{prefix}/mean"))?.to_vec();
    let var = ckpt.vector(&format!("{prefix}/var"))?.to_vec();
    if count.len() != 1 || mean.len() != dim || var.len() != dim {
        return Err(IoError::Restore(format!("{prefix} has the wrong width (expected {dim})")));
    }
    Ok(RunningNorm { count: count[0], mean, var })
}

fn put_bundle(ckpt: &mut Checkpoint, b: &PolicyBundle) -> Result<(), IoError> {
    put_module(ckpt, "bundle", &b.net)?;
    put_norm(ckpt, "bundle.obs_norm", &b.obs_norm);
    put_norm(ckpt, "bundle.pref_norm", &b.pref_norm);
    let opt = &b.optimizer;
    let c = opt.config;
    ckpt.put_vector("bundle.adam/config", vec![c.learning_rate, c.beta1, c.beta2, c.eps]);
    ckpt.put_vector("bundle.adam/step", vec![opt.steps() as f64]);
    let (first, second) = opt.moments();
    for (i, (m, v)) in first.iter().zip(second).enumerate() {
        ckpt.put_vector(format!("bundle.adam/first/{i}"), m.clone());
        ckpt.put_vector(format!("bundle.adam/second/{i}"), v.clone());
    }
    Ok(())
}

/// Rebuilds the policy bundle stored in `ckpt`, shaped by `config`.
pub fn bundle_from_checkpoint(ckpt: &Checkpoint, config: &RunConfig) -> Result<PolicyBundle, IoError> {
    let obs_dim = ckpt.vector("bundle.obs_norm/mean")?.len();
    let (_, first_w) = ckpt.array("bundle/policy.log_std")?;
    let act_dim = first_w.len();
    let mut b = PolicyBundle::new(obs_dim, act_dim, &config.ppo, &mut rng_from_seed(0))
        .map_err(|e| IoError::Restore(e.to_string()))?;
    load_module(ckpt, "bundle", &mut b.net)?;
    b.obs_norm = load_norm(ckpt, "bundle.obs_norm", obs_dim)?;
    b.pref_norm = load_norm(ckpt, "bundle.pref_norm", 1)?;
    let c = ckpt.vector("bundle.adam/config")?;
    if c.len() != 4 {
        return Err(IoError::Restore("adam config needs 4 values".into()));
    }
    let config = AdamConfig {
        learning_rate: c[0],
        beta1: c[1],
        beta2: c[2],
        eps: c[3],
    };
    let step = ckpt.vector("bundle.adam/step")?.first().copied().unwrap_or(0.0) as u64;
    let mut first = Vec::new();
    let mut second = Vec::new();
    while let Ok(m) = ckpt.vector(&format!("bundle.adam/first/{}", first.len())) {
        second.push(ckpt.vector(&format!("bundle.adam/second/{}", first.len()))?.to_vec());
        first.push(m.to_vec());
    }
    b.optimizer = Adam::restore(config, step, first, second).map_err(|e| IoError::Restore(e.to_string()))?;
    Ok(b)
}

fn put_predictor(ckpt: &mut Checkpoint, p: &EnsemblePredictor) -> Result<PredictorMeta, IoError> {
    for (m, member) in p.members().iter().enumerate() {
        put_module(ckpt, &format!("predictor/{m}"), member)?;
        ckpt.put_vector(format!("predictor/{m}/stats.mean"), member.stats().mean.clone());
        ckpt.put_vector(format!("predictor/{m}/stats.std"), member.stats().std.clone());
    }
    Ok(PredictorMeta {
        config: p.config().clone(),
        validation_losses: p.validation_losses().to_vec(),
    })
}

fn load_predictor(ckpt: &Checkpoint, pm: &PredictorMeta) -> Result<EnsemblePredictor, IoError> {
    let mut members = Vec::with_capacity(pm.validation_losses.len());
    for m in 0..pm.validation_losses.len() {
        let stats = FeatureStats {
            mean: ckpt.vector(&format!("predictor/{m}/stats.mean"))?.to_vec(),
            std: ckpt.vector(&format!("predictor/{m}/stats.std"))?.to_vec(),
        };
        let mut member = RewardPredictor::new(pm.config.clone(), stats, &mut rng_from_seed(0))
            .map_err(|e| IoError::Restore(e.to_string()))?;
        load_module(ckpt, &format!("predictor/{m}"), &mut member)?;
        members.push(member);
    }
    EnsemblePredictor::new(members, pm.validation_losses.clone()).map_err(|e| IoError::Restore(e.to_string()))
}

/// A standalone ensemble checkpoint.
pub fn predictor_to_checkpoint(p: &EnsemblePredictor) -> Result<Checkpoint, IoError> {
    let mut ckpt = Checkpoint::new();
    let meta = put_predictor(&mut ckpt, p)?;
    ckpt.put_text("predictor.meta", json(&meta)?);
    Ok(ckpt)
}

pub fn predictor_from_checkpoint(ckpt: &Checkpoint) -> Result<EnsemblePredictor, IoError> {
    let meta: PredictorMeta = parse(ckpt, "predictor.meta")?;
    load_predictor(ckpt, &meta)
}

/// The run configuration a loop-state checkpoint was written with.
pub fn stored_config(ckpt: &Checkpoint) -> Result<RunConfig, IoError> {
    parse(ckpt, "config")
}

/// Every field of the loop state as a checkpoint.
pub fn state_to_checkpoint(state: &LoopState) -> Result<Checkpoint, IoError> {
    let mut ckpt = Checkpoint::new();
    ckpt.put_text("config", json(&state.config)?);
    put_bundle(&mut ckpt, &state.bundle)?;
    for (s, slot) in state.envs.slots.iter().enumerate() {
        ckpt.put_vector(format!("env/{s}/state"), slot.env.save_state());
        ckpt.put_vector(format!("env/{s}/observation"), slot.observation.clone());
        let width = slot.window.front().map_or(0, Vec::len);
        let data: Vec<f64> = slot.window.iter().flatten().copied().collect();
        ckpt.put_array(format!("env/{s}/window"), vec![slot.window.len(), width], data)?;
    }
    let predictor = match &state.predictor {
        Some(p) => Some(put_predictor(&mut ckpt, p)?),
        None => None,
    };
    let meta = Meta {
        epoch: state.epoch,
        cycles: state.cycles,
        tally: state.tally,
        slots: state
            .envs
            .slots
            .iter()
            .map(|s| SlotMeta {
                episode_index: s.episode_index,
                episode_step: s.episode_step,
            })
            .collect(),
        predictor,
    };
    ckpt.put_text("meta", json(&meta)?);
    ckpt.put_text("dataset", json(&state.dataset.to_vec())?);
    ckpt.put_text("pool", json(&state.pool)?);
    ckpt.put_text("buffer", json(&state.buffer.pairs())?);
    Ok(ckpt)
}

pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<LoopState, IoError> {
    let config: RunConfig = parse(ckpt, "config")?;
    let meta: Meta = parse(ckpt, "meta")?;
    let bundle = bundle_from_checkpoint(ckpt, &config)?;
    let mut state = LoopState::with_bundle(config, bundle).map_err(|e| IoError::Restore(e.to_string()))?;
    if meta.slots.len() != state.envs.len() {
        return Err(IoError::Restore(format!(
            "{} env slots stored, config has {}",
            meta.slots.len(),
            state.envs.len()
        )));
    }
    for (s, (slot, m)) in state.envs.slots.iter_mut().zip(&meta.slots).enumerate() {
        slot.env
            .load_state(ckpt.vector(&format!("env/{s}/state"))?)
            .map_err(|e| IoError::Restore(e.to_string()))?;
        slot.observation = ckpt.vector(&format!("env/{s}/observation"))?.to_vec();
        let (shape, data) = ckpt.array(&format!("env/{s}/window"))?;
        let width = shape.get(1).copied().unwrap_or(0).max(1);
        slot.window = if data.is_empty() {
            VecDeque::new()
        } else {
            data.chunks(width).map(<[f64]>::to_vec).collect()
        };
        slot.episode_index = m.episode_index;
        slot.episode_step = m.episode_step;
    }
    if let Some(pm) = meta.predictor {
        state.predictor = Some(load_predictor(ckpt, &pm)?);
    }
    let dataset: Vec<PreferenceTriple> = parse(ckpt, "dataset")?;
    state.dataset.extend(dataset);
    state.pool = parse(ckpt, "pool")?;
    let pairs: Vec<SegmentPair> = parse(ckpt, "buffer")?;
    state.buffer.push(pairs);
    state.epoch = meta.epoch;
    state.cycles = meta.cycles;
    state.tally = meta.tally;
    Ok(state)
}

pub fn save_state(path: &Path, state: &LoopState) -> Result<(), IoError> {
    save_checkpoint(path, &state_to_checkpoint(state)?)
}

pub fn load_state(path: &Path) -> Result<LoopState, IoError> {
    state_from_checkpoint(&load_checkpoint(path)?)
}
