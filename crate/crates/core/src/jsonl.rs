//! Newline-delimited JSON helpers.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    write_jsonl(&mut out, items).expect("writing to a Vec cannot fail");
    out
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses one value per non-blank line. Line numbers in errors are 1-based.
pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(r: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn from_jsonl<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>, JsonlError> {
    read_jsonl(bytes)
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>, JsonlError> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}
