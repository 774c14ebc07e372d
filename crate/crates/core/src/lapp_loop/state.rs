use serde::{Deserialize, Serialize};

use super::{resample_pool, sample_pairs, DatasetWindow, LoopError, PreferenceBuffer, SlidingDataset};
use crate::annotation::{LabelTally, PairLabeler};
use crate::envs::Env;
use crate::io::RunConfig;
use crate::preference::PreferenceTriple;
use crate::rl::{collect_rollout, evaluate_policy, ppo_update, EvalMetrics, PolicyBundle, VecEnv};
use crate::seeding::{derive_seed, rng_for, Stream};
use crate::trainer::{train_ensemble, EnsemblePredictor};

/// Columns that depend only on the policy's experience. A run with β = 0
/// reproduces the baseline's values exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyView {
    pub epoch: usize,
    pub mean_env_reward: f64,
    pub tracking_error: f64,
    pub sync_error: Option<f64>,
    pub cadence: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub eval_tracking_error: Option<f64>,
    pub eval_sync_error: Option<f64>,
    pub eval_cadence: Option<f64>,
    pub eval_reward: Option<f64>,
}

/// One line of the metrics stream. Preference columns are empty for the
/// baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    #[serde(flatten)]
    pub policy: PolicyView,
    pub mean_pref_reward: Option<f64>,
    pub buffer_pairs: Option<usize>,
    pub dataset_size: Option<usize>,
    pub predictor_updated: Option<bool>,
    pub annotated: Option<usize>,
    pub labeled: Option<usize>,
    pub discarded: Option<usize>,
    pub label_0: Option<usize>,
    pub label_1: Option<usize>,
    pub label_2: Option<usize>,
    pub label_3: Option<usize>,
    pub predictor_validation_loss: Option<f64>,
}

impl MetricsRow {
    pub fn epoch(&self) -> usize {
        self.policy.epoch
    }
}

/// Outcome of one refresh of the predictor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleReport {
    pub stage: usize,
    pub tally: Option<LabelTally>,
    pub evicted: usize,
    pub training_set: usize,
    pub retrained: bool,
    pub validation_loss: Option<f64>,
    pub error: Option<String>,
}

/// Everything the loop carries between epochs.
#[derive(Clone, Debug)]
pub struct LoopState {
    pub config: RunConfig,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub bundle: PolicyBundle,
    pub envs: VecEnv,
    pub predictor: Option<EnsemblePredictor>,
    /// D_p in latest mode.
    pub dataset: SlidingDataset,
    /// Every labeled triple, in full_process mode.
    pub pool: Vec<PreferenceTriple>,
    /// B_p.
    pub buffer: PreferenceBuffer,
    /// Refresh cycles attempted so far (the bootstrap is cycle 0).
    pub cycles: usize,
    /// Label counts over the whole run.
    pub tally: LabelTally,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn mean_loss(p: &EnsemblePredictor) -> f64 {
    mean(p.validation_losses())
}

impl LoopState {
    /// Fresh policy and environments; no predictor yet.
    pub fn new(config: RunConfig) -> Result<Self, LoopError> {
        config.validate().map_err(|e| LoopError::Config(e.to_string()))?;
        let probe = Env::new(config.env.clone());
        let mut init = rng_for(config.seed, Stream::PolicyInit, 0);
        let bundle = PolicyBundle::new(probe.observation_dim(), probe.action_dim(), &config.ppo, &mut init)?;
        Self::with_bundle(config, bundle)
    }

    /// Starts a run from an existing policy (fine-tuning in another env).
    pub fn with_bundle(config: RunConfig, bundle: PolicyBundle) -> Result<Self, LoopError> {
        config.validate().map_err(|e| LoopError::Config(e.to_string()))?;
        let probe = Env::new(config.env.clone());
        if probe.observation_dim() != bundle.obs_dim() || probe.action_dim() != bundle.act_dim() {
            return Err(LoopError::Mismatch(format!(
                "policy maps {} -> {}, environment has {} -> {}",
                bundle.obs_dim(),
                bundle.act_dim(),
                probe.observation_dim(),
                probe.action_dim()
            )));
        }
        let run = &config.run;
        Ok(Self {
            envs: VecEnv::new(&config.env, run.num_envs, config.seed),
            dataset: SlidingDataset::new(run.dataset_size),
            buffer: PreferenceBuffer::new(run.buffer_capacity()),
            pool: Vec::new(),
            predictor: None,
            epoch: 0,
            cycles: 0,
            tally: LabelTally::default(),
            bundle,
            config,
        })
    }

    /// Triples the next retrain would use.
    pub fn training_set(&self, cycle: usize) -> Vec<PreferenceTriple> {
        match self.config.run.window {
            DatasetWindow::Latest => self.dataset.to_vec(),
            DatasetWindow::FullProcess => resample_pool(
                &self.pool,
                self.config.run.dataset_size,
                &mut rng_for(self.config.seed, Stream::PoolResample, cycle as u64),
            ),
        }
    }

    fn store(&mut self, triples: Vec<PreferenceTriple>) -> usize {
        match self.config.run.window {
            DatasetWindow::Latest => self.dataset.extend(triples),
            DatasetWindow::FullProcess => {
                self.pool.extend(triples);
                0
            }
        }
    }

    fn retrain(&mut self, cycle: usize) -> Result<(EnsemblePredictor, usize), LoopError> {
        let set = self.training_set(cycle);
        let seed = derive_seed(self.config.seed, Stream::Retrain, cycle as u64);
        let out = train_ensemble(&set, &self.config.predictor, &self.config.trainer, seed)?;
        Ok((out.ensemble, set.len()))
    }

    /// Labels rollouts of the current policy until |D_p| triples exist, then
    /// trains the first ensemble. Rollouts run in separate environments on a
    /// copy of the policy, so the training stream is untouched.
    pub fn bootstrap(&mut self, annotator: &dyn PairLabeler) -> Result<CycleReport, LoopError> {
        let cfg = self.config.clone();
        let needed = cfg.run.dataset_size;
        let base = derive_seed(cfg.seed, Stream::Bootstrap, u64::MAX);
        let mut envs = VecEnv::with_stream(&cfg.env, cfg.run.num_envs, cfg.seed, Stream::Bootstrap);
        let mut policy = self.bundle.clone();
        let mut triples: Vec<PreferenceTriple> = Vec::with_capacity(needed);
        let mut tally = LabelTally::default();
        let mut attempts = 0;
        while triples.len() < needed {
            if attempts == cfg.run.bootstrap_attempts {
                return Err(LoopError::BootstrapExhausted {
                    attempts,
                    collected: triples.len(),
                    needed,
                    partial: triples,
                });
            }
            let a = attempts as u64;
            let buf = collect_rollout(
                &mut policy,
                &mut envs,
                None,
                cfg.run.steps_per_epoch,
                &cfg.ppo,
                &mut rng_for(base, Stream::PolicyNoise, a),
            )?;
            attempts += 1;
            let pairs = sample_pairs(
                &buf,
                needed - triples.len(),
                cfg.run.segment_len,
                &mut rng_for(base, Stream::PairSampling, a),
            )?;
            let (new, t) = match annotator.label(&pairs, 0) {
                Ok(x) => x,
                Err(source) => return Err(LoopError::BootstrapAnnotation { source, partial: triples }),
            };
            tally.merge(&t);
            triples.extend(new);
            log::info!("bootstrap rollout {attempts}: {}/{needed} triples", triples.len());
        }
        self.tally.merge(&tally);
        let evicted = self.store(triples);
        let (ensemble, training_set) = self.retrain(0)?;
        let loss = mean_loss(&ensemble);
        self.predictor = Some(ensemble);
        self.cycles = 1;
        Ok(CycleReport {
            stage: 0,
            tally: Some(tally),
            evicted,
            training_set,
            retrained: true,
            validation_loss: Some(loss),
            error: None,
        })
    }

    /// Labels B_p, updates the dataset and retrains. Annotation or training
    /// failures keep the previous predictor and are reported, not raised.
    pub fn update_predictor_cycle(&mut self, annotator: &dyn PairLabeler) -> CycleReport {
        let stage = self.cycles;
        self.cycles += 1;
        let pairs = self.buffer.take();
        let mut report = CycleReport {
            stage,
            tally: None,
            evicted: 0,
            training_set: 0,
            retrained: false,
            validation_loss: None,
            error: None,
        };
        let (triples, tally) = match annotator.label(&pairs, stage) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("annotation failed at cycle {stage}, keeping the current predictor: {e}");
                report.error = Some(e.to_string());
                return report;
            }
        };
        self.tally.merge(&tally);
        report.tally = Some(tally);
        report.evicted = self.store(triples);
        match self.retrain(stage) {
            Ok((ensemble, n)) => {
                report.validation_loss = Some(mean_loss(&ensemble));
                report.training_set = n;
                report.retrained = true;
                self.predictor = Some(ensemble);
            }
            Err(e) => {
                log::warn!("retraining failed at cycle {stage}, keeping the current predictor: {e}");
                report.error = Some(e.to_string());
            }
        }
        report
    }

    fn evaluate(&self) -> Result<EvalMetrics, LoopError> {
        let run = &self.config.run;
        let steps = if run.eval_steps == 0 { self.config.env.episode_length } else { run.eval_steps };
        Ok(evaluate_policy(&self.bundle, &self.config.env, run.eval_envs, steps, self.config.seed)?)
    }

    /// Deterministic evaluation of the current policy.
    pub fn evaluate_now(&self) -> Result<EvalMetrics, LoopError> {
        self.evaluate()
    }

    /// One epoch: rollout, PPO update, pair collection and, on every M-th
    /// epoch, a predictor refresh.
    pub fn run_epoch(&mut self, annotator: Option<&dyn PairLabeler>) -> Result<MetricsRow, LoopError> {
        let cfg = self.config.clone();
        let baseline = cfg.run.baseline;
        let epoch = self.epoch as u64;
        if !baseline && self.predictor.is_none() {
            return Err(LoopError::Mismatch("no predictor; bootstrap first or run the baseline".into()));
        }
        let predictor = if baseline { None } else { self.predictor.as_ref() };
        let mut buf = collect_rollout(
            &mut self.bundle,
            &mut self.envs,
            predictor,
            cfg.run.steps_per_epoch,
            &cfg.ppo,
            &mut rng_for(cfg.seed, Stream::PolicyNoise, epoch),
        )?;
        let rollout = buf.metrics(cfg.env.dt)?;
        buf.compute_advantages(cfg.ppo.gamma, cfg.ppo.lambda);
        let stats = ppo_update(&mut self.bundle, &buf, &cfg.ppo, &mut rng_for(cfg.seed, Stream::PpoMinibatch, epoch))?;
        self.epoch += 1;

        let eval = if cfg.run.eval_interval > 0 && self.epoch % cfg.run.eval_interval == 0 {
            Some(self.evaluate()?)
        } else {
            None
        };
        let mut row = MetricsRow {
            variant: cfg.run.variant.clone(),
            policy: PolicyView {
                epoch: epoch as usize,
                mean_env_reward: rollout.mean_reward,
                tracking_error: rollout.tracking_error,
                sync_error: rollout.sync_error,
                cadence: rollout.cadence,
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
                entropy: stats.entropy,
                approx_kl: stats.approx_kl,
                clip_fraction: stats.clip_fraction,
                eval_tracking_error: eval.map(|e| e.tracking_error),
                eval_sync_error: eval.and_then(|e| e.sync_error),
                eval_cadence: eval.and_then(|e| e.cadence),
                eval_reward: eval.map(|e| e.mean_reward),
            },
            mean_pref_reward: None,
            buffer_pairs: None,
            dataset_size: None,
            predictor_updated: None,
            annotated: None,
            labeled: None,
            discarded: None,
            label_0: None,
            label_1: None,
            label_2: None,
            label_3: None,
            predictor_validation_loss: None,
        };
        if baseline {
            return Ok(row);
        }

        row.mean_pref_reward = Some(mean(&buf.pref_rewards));
        let pairs = sample_pairs(
            &buf,
            cfg.run.pairs_per_epoch,
            cfg.run.segment_len,
            &mut rng_for(cfg.seed, Stream::PairSampling, epoch),
        )?;
        self.buffer.push(pairs);
        row.buffer_pairs = Some(self.buffer.len());
        row.predictor_updated = Some(false);
        if self.epoch % cfg.run.update_interval == 0 {
            let annotator = annotator.ok_or_else(|| LoopError::Mismatch("a refresh is due but no annotator was given".into()))?;
            let report = self.update_predictor_cycle(annotator);
            row.predictor_updated = Some(report.retrained);
            if let Some(t) = report.tally {
                row.annotated = Some(t.annotated);
                row.labeled = Some(t.labeled);
                row.discarded = Some(t.discarded);
                row.label_0 = Some(t.by_raw[0]);
                row.label_1 = Some(t.by_raw[1]);
                row.label_2 = Some(t.by_raw[2]);
                row.label_3 = Some(t.by_raw[3]);
            }
        }
        row.dataset_size = Some(match cfg.run.window {
            DatasetWindow::Latest => self.dataset.len(),
            DatasetWindow::FullProcess => self.pool.len(),
        });
        row.predictor_validation_loss = self.predictor.as_ref().map(mean_loss);
        Ok(row)
    }

    /// Runs epochs until `config.run.epochs`, handing each row to `sink`
    /// together with the state reached after it.
    pub fn run<F>(&mut self, annotator: Option<&dyn PairLabeler>, mut sink: F) -> Result<(), LoopError>
    where
        F: FnMut(&MetricsRow, &LoopState) -> Result<(), LoopError>,
    {
        while self.epoch < self.config.run.epochs {
            let row = self.run_epoch(annotator)?;
            sink(&row, self)?;
        }
        Ok(())
    }
}
