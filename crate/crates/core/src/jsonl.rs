//! Line-delimited JSON helpers shared by every on-disk format.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JsonlError + '_ {
    move |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads one value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(values: &[T]) -> String {
    let mut s = String::new();
    for v in values {
        s.push_str(&serde_json::to_string(v).expect("serializable value"));
        s.push('\n');
    }
    s
}

/// Replaces `path` atomically with the given lines.
pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<(), JsonlError> {
    write_atomic(path, to_jsonl(values).as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        w.write_all(bytes).map_err(io_err(&tmp))?;
        w.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn append_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(values).as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
