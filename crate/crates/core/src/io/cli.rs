//! The `prefrl` command line.

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use super::{
    bundle_from_checkpoint, load_checkpoint, load_config, load_state, predictor_to_checkpoint, read_jsonl,
    save_checkpoint, save_state, stored_config, write_jsonl, DirLock, MetricsWriter, RunConfig,
};
use crate::annotation::{replay_records, Annotator, Backend, PairLabeler, SegmentPair};
use crate::lapp_loop::{sample_pairs, LoopState};
use crate::preference::PreferenceTriple;
use crate::rl::{collect_rollout, evaluate_policy, PolicyBundle, VecEnv};
use crate::seeding::{rng_for, Stream};
use crate::trainer::{train_ensemble, write_curves_csv};

const STATE_FILE: &str = "checkpoint.ckpt";

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Oracle,
    Replay,
    Llm,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Oracle => Backend::Oracle,
            BackendArg::Replay => Backend::Replay,
            BackendArg::Llm => Backend::Llm,
        }
    }
}

/// Preference-driven policy training.
#[derive(Debug, Parser)]
#[command(name = "prefrl", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Overrides the configured annotator backend.
    #[arg(long, global = true, value_enum)]
    annotator: Option<BackendArg>,
    /// Replay file for `--annotator replay`.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full loop: bootstrap, then PPO epochs with periodic predictor refreshes.
    Train {
        /// Environment reward only (beta = 0, no predictor).
        #[arg(long)]
        baseline: bool,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Save the loop state every this many epochs.
        #[arg(long, default_value_t = 25)]
        checkpoint_every: usize,
    },
    /// Label initial rollouts and train the first ensemble.
    Bootstrap,
    /// Label a JSONL file of segment pairs.
    Annotate {
        #[arg(long)]
        pairs: PathBuf,
        /// Refresh counter passed to the annotator (selects oracle criteria).
        #[arg(long, default_value_t = 0)]
        stage: usize,
    },
    /// Train an ensemble on a JSONL file of preference triples.
    TrainPredictor {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Deterministic rollout of a policy; prints gait and tracking metrics.
    Eval {
        /// Policy to evaluate; a fresh policy when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        envs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune a trained policy in the environment of `--config`.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 25)]
        checkpoint_every: usize,
    },
    /// Roll out a policy and write segment pairs for offline labeling.
    ExportSegments {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Cli::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            1
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn base_config(args: &Cli) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    override_config(args, &mut cfg)?;
    Ok(cfg)
}

fn override_config(args: &Cli, cfg: &mut RunConfig) -> Result<()> {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = args.annotator {
        cfg.annotator.backend = b.into();
    }
    if let Some(p) = &args.replay {
        cfg.annotator.replay_path = Some(p.clone());
    }
    cfg.validate()?;
    Ok(())
}

fn annotator(cfg: &RunConfig) -> Result<Annotator> {
    Annotator::from_config(&cfg.annotator).context("building the annotator")
}

fn policy_from(path: &Path, cfg: &RunConfig) -> Result<PolicyBundle> {
    let ckpt = load_checkpoint(path)?;
    let source = stored_config(&ckpt).unwrap_or_else(|_| cfg.clone());
    Ok(bundle_from_checkpoint(&ckpt, &source)?)
}

fn dispatch(args: Cli) -> Result<()> {
    match &args.command {
        Command::Train {
            baseline,
            resume,
            epochs,
            checkpoint_every,
        } => {
            let _lock = DirLock::acquire(&args.out_dir)?;
            let state_path = args.out_dir.join(STATE_FILE);
            let (state, writer) = if *resume {
                let mut state = load_state(&state_path)?;
                if args.seed.is_some_and(|s| s != state.config.seed) {
                    bail!("--seed cannot change the seed of a run being resumed");
                }
                override_config(&args, &mut state.config)?;
                if let Some(e) = epochs {
                    state.config.run.epochs = *e;
                }
                let writer = MetricsWriter::resume(&args.out_dir, state.epoch)?;
                log::info!("resuming at epoch {}", state.epoch);
                (state, writer)
            } else {
                if state_path.exists() {
                    bail!("{} already holds a run; pass --resume or pick another --out-dir", args.out_dir.display());
                }
                let mut cfg = base_config(&args)?;
                if let Some(e) = epochs {
                    cfg.run.epochs = *e;
                }
                if *baseline {
                    cfg.run.baseline = true;
                    cfg.ppo.beta = 0.0;
                }
                let state = LoopState::new(cfg)?;
                (state, MetricsWriter::create(&args.out_dir)?)
            };
            drive(state, writer, &args.out_dir, *checkpoint_every, !*resume)
        }
        Command::Bootstrap => {
            let _lock = DirLock::acquire(&args.out_dir)?;
            let cfg = base_config(&args)?;
            let labeler = annotator(&cfg)?;
            let mut state = LoopState::new(cfg)?;
            let report = state.bootstrap(&labeler)?;
            write_jsonl(&args.out_dir.join("dataset.jsonl"), &state.training_set(0))?;
            save_state(&args.out_dir.join(STATE_FILE), &state)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Annotate { pairs, stage } => {
            let _lock = DirLock::acquire(&args.out_dir)?;
            let cfg = base_config(&args)?;
            let labeler = annotator(&cfg)?;
            let pairs: Vec<SegmentPair> = read_jsonl(pairs)?;
            let raw = labeler.annotate(&pairs, *stage)?;
            write_jsonl(&args.out_dir.join("labels.jsonl"), &replay_records(&pairs, &raw))?;
            let (triples, tally) = crate::annotation::to_triples(&pairs, &raw)?;
            write_jsonl(&args.out_dir.join("triples.jsonl"), &triples)?;
            println!("{}", serde_json::to_string(&tally)?);
            Ok(())
        }
        Command::TrainPredictor { dataset } => {
            let _lock = DirLock::acquire(&args.out_dir)?;
            let cfg = base_config(&args)?;
            let triples: Vec<PreferenceTriple> = read_jsonl(dataset)?;
            let out = train_ensemble(&triples, &cfg.predictor, &cfg.trainer, cfg.seed)?;
            let curves = args.out_dir.join("curves.csv");
            let f = File::create(&curves).with_context(|| curves.display().to_string())?;
            write_curves_csv(f, &out.curves)?;
            save_checkpoint(&args.out_dir.join("predictor.ckpt"), &predictor_to_checkpoint(&out.ensemble)?)?;
            println!("selected members: {:?}", out.selected);
            println!("validation losses: {:?}", out.ensemble.validation_losses());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            envs,
            steps,
        } => {
            let cfg = base_config(&args)?;
            let bundle = match checkpoint {
                Some(p) => policy_from(p, &cfg)?,
                None => LoopState::new(cfg.clone())?.bundle,
            };
            let count = envs.unwrap_or(cfg.run.eval_envs);
            let steps = steps.unwrap_or(cfg.env.episode_length);
            let m = evaluate_policy(&bundle, &cfg.env, count, steps, cfg.seed)?;
            println!("tracking_error {:.6}", m.tracking_error);
            match m.sync_error {
                Some(v) => println!("sync_error {v:.6}"),
                None => println!("sync_error n/a"),
            }
            match m.cadence {
                Some(v) => println!("cadence {v:.6}"),
                None => println!("cadence n/a"),
            }
            println!("mean_reward {:.6}", m.mean_reward);
            Ok(())
        }
        Command::Transfer {
            checkpoint,
            baseline,
            epochs,
            checkpoint_every,
        } => {
            let _lock = DirLock::acquire(&args.out_dir)?;
            let mut cfg = base_config(&args)?;
            if let Some(e) = epochs {
                cfg.run.epochs = *e;
            }
            if *baseline {
                cfg.run.baseline = true;
                cfg.ppo.beta = 0.0;
            }
            let bundle = policy_from(checkpoint, &cfg)?;
            let state = LoopState::with_bundle(cfg, bundle)?;
            let writer = MetricsWriter::create(&args.out_dir)?;
            drive(state, writer, &args.out_dir, *checkpoint_every, true)
        }
        Command::ExportSegments { checkpoint, count } => {
            let _lock = DirLock::acquire(&args.out_dir)?;
            let cfg = base_config(&args)?;
            let mut bundle = match checkpoint {
                Some(p) => policy_from(p, &cfg)?,
                None => LoopState::new(cfg.clone())?.bundle,
            };
            let mut envs = VecEnv::new(&cfg.env, cfg.run.num_envs, cfg.seed);
            let buf = collect_rollout(
                &mut bundle,
                &mut envs,
                None,
                cfg.run.steps_per_epoch,
                &cfg.ppo,
                &mut rng_for(cfg.seed, Stream::PolicyNoise, 0),
            )?;
            let pairs = sample_pairs(&buf, *count, cfg.run.segment_len, &mut rng_for(cfg.seed, Stream::PairSampling, 0))?;
            let path = args.out_dir.join("pairs.jsonl");
            write_jsonl(&path, &pairs)?;
            println!("wrote {} pairs to {}", pairs.len(), path.display());
            Ok(())
        }
    }
}

/// Bootstraps when needed and runs epochs, writing metrics and checkpoints.
fn drive(mut state: LoopState, mut writer: MetricsWriter, out: &Path, every: usize, fresh: bool) -> Result<()> {
    let state_path = out.join(STATE_FILE);
    let labeler = if state.config.run.baseline { None } else { Some(annotator(&state.config)?) };
    if fresh {
        std::fs::write(out.join("config.toml"), state.config.to_toml()?)?;
        if let Some(l) = &labeler {
            let report = state.bootstrap(l)?;
            log::info!("bootstrap: {:?}", report.tally);
            save_state(&state_path, &state)?;
        }
    }
    let labeler = labeler.as_ref().map(|l| l as &dyn PairLabeler);
    while state.epoch < state.config.run.epochs {
        let row = state.run_epoch(labeler)?;
        writer.write(&row)?;
        log::info!(
            "epoch {} tracking {:.4} reward {:.4}",
            row.epoch(),
            row.policy.tracking_error,
            row.policy.mean_env_reward
        );
        if every > 0 && state.epoch % every == 0 {
            save_state(&state_path, &state)?;
        }
    }
    save_state(&state_path, &state)?;
    let m = state.evaluate_now()?;
    println!("epochs {}", state.epoch);
    println!("tracking_error {:.6}", m.tracking_error);
    if let Some(v) = m.sync_error {
        println!("sync_error {v:.6}");
    }
    if let Some(v) = m.cadence {
        println!("cadence {v:.6}");
    }
    Ok(())
}
