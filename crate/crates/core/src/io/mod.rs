//! Run configuration, checkpoints, metrics files, JSONL datasets and the
//! output-directory lock.

pub mod cli;
mod checkpoint;
mod config;
mod files;
mod snapshot;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Entry, CHECKPOINT_VERSION, MAGIC};
pub use config::{load_config, RunConfig, CONFIG_VERSION};
pub use files::{read_jsonl, write_jsonl, DirLock, MetricsWriter};
pub use snapshot::{
    bundle_from_checkpoint, load_state, predictor_from_checkpoint, predictor_to_checkpoint, save_state,
    state_from_checkpoint, state_to_checkpoint, stored_config,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {error}")]
    File { path: PathBuf, error: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{what} version {found} is not supported (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint was written with a different byte order")]
    Endianness,
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint entry: {0}")]
    Entry(String),
    #[error("{path} line {line}: {message}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("output directory {0} is in use by another run (remove the lock file if it is stale)")]
    Locked(PathBuf),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("restoring state: {0}")]
    Restore(String),
}

#[cfg(test)]
mod tests;
