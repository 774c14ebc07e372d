use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::IoError;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |e| IoError::File {
        path: path.to_path_buf(),
        error: e,
    }
}

/// One JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    let f = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| IoError::Jsonl {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every non-blank line as a `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let f = File::open(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Appends rows to `metrics.jsonl` and `metrics.csv`. Epoch indices must
/// increase.
pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    columns: Option<Vec<String>>,
    last_epoch: Option<u64>,
    dir: PathBuf,
}

fn flatten(row: &impl Serialize) -> Result<Map<String, Value>, IoError> {
    match serde_json::to_value(row).map_err(|e| IoError::Metrics(e.to_string()))? {
        Value::Object(m) => Ok(m),
        other => Err(IoError::Metrics(format!("rows must be objects, got {other}"))),
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl MetricsWriter {
    /// Starts fresh files in `dir`.
    pub fn create(dir: &Path) -> Result<Self, IoError> {
        Self::open(dir, &[])
    }

    /// Rewrites the files with the rows of an earlier run whose epoch is
    /// below `next_epoch`, then continues after them.
    pub fn resume(dir: &Path, next_epoch: usize) -> Result<Self, IoError> {
        let path = dir.join("metrics.jsonl");
        let old: Vec<Map<String, Value>> = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
        let keep: Vec<Map<String, Value>> = old
            .into_iter()
            .filter(|r| r.get("epoch").and_then(Value::as_u64).is_some_and(|e| e < next_epoch as u64))
            .collect();
        Self::open(dir, &keep)
    }

    fn open(dir: &Path, rows: &[Map<String, Value>]) -> Result<Self, IoError> {
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
        let jp = dir.join("metrics.jsonl");
        let cp = dir.join("metrics.csv");
        let jsonl = BufWriter::new(File::create(&jp).map_err(file_err(&jp))?);
        let csv = csv::Writer::from_writer(File::create(&cp).map_err(file_err(&cp))?);
        let mut w = Self {
            jsonl,
            csv,
            columns: None,
            last_epoch: None,
            dir: dir.to_path_buf(),
        };
        for r in rows {
            w.write_map(r.clone())?;
        }
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<(), IoError> {
        self.write_map(flatten(row)?)
    }

    fn write_map(&mut self, map: Map<String, Value>) -> Result<(), IoError> {
        let epoch = map
            .get("epoch")
            .and_then(Value::as_u64)
            .ok_or_else(|| IoError::Metrics("row has no integer `epoch`".into()))?;
        if self.last_epoch.is_some_and(|last| epoch <= last) {
            return Err(IoError::Metrics(format!(
                "epoch {epoch} after {}; indices must increase",
                self.last_epoch.unwrap_or_default()
            )));
        }
        let columns = self.columns.get_or_insert_with(|| map.keys().cloned().collect());
        if map.len() != columns.len() || columns.iter().any(|c| !map.contains_key(c)) {
            return Err(IoError::Metrics("row columns differ from the header".into()));
        }
        if self.last_epoch.is_none() {
            self.csv.write_record(columns.iter()).map_err(|e| IoError::Metrics(e.to_string()))?;
        }
        self.csv
            .write_record(columns.iter().map(|c| cell(&map[c])))
            .map_err(|e| IoError::Metrics(e.to_string()))?;
        serde_json::to_writer(&mut self.jsonl, &map).map_err(|e| IoError::Metrics(e.to_string()))?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        self.csv.flush()?;
        self.last_epoch = Some(epoch);
        Ok(())
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".prefrl.lock";

    pub fn acquire(dir: &Path) -> Result<Self, IoError> {
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(IoError::Locked(dir.to_path_buf())),
            Err(e) => Err(IoError::File { path, error: e }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
