//! File helpers that attach the offending path to every error.

use crate::{BenchError, Result};
use argus_core::geometry::{write_tkg, TokenGrid};
use argus_core::volume::{read_ctvol, read_raw_with_descriptor, write_ctvol, Volume, VolumeError};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| BenchError::io(path, e))
}

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(BenchError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing; run the producing command first"),
        ))
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| BenchError::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| BenchError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| BenchError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| BenchError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BenchError::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| BenchError::format(path, e))?;
        w.write_all(b"\n").map_err(|e| BenchError::io(path, e))?;
    }
    finish(path, w)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| BenchError::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| BenchError::format(path, e))?;
    w.write_all(b"\n").map_err(|e| BenchError::io(path, e))?;
    finish(path, w)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| BenchError::format(path, e))?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

fn volume_error(path: &Path, e: VolumeError) -> BenchError {
    match e {
        VolumeError::Io(io) => BenchError::io(path, io),
        other => BenchError::format(path, other),
    }
}

/// Reads a `.ctvol`, or a headerless `.raw` with a `.json` descriptor beside it.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if path.extension().is_some_and(|e| e == "raw") {
        let desc = path.with_extension("json");
        read_raw_with_descriptor(path, &desc).map_err(|e| volume_error(path, e))
    } else {
        read_ctvol(path).map_err(|e| volume_error(path, e))
    }
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    write_ctvol(v, path).map_err(|e| volume_error(path, e))
}

pub fn save_grid(path: &Path, g: &TokenGrid<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    write_tkg(g, path).map_err(|e| match e {
        argus_core::geometry::GeometryError::Io(io) => BenchError::io(path, io),
        other => BenchError::format(path, other),
    })
}

/// Record ids become file names, so they may not name other directories.
pub fn file_name(id: &str, ext: &str) -> Result<String> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
        return Err(BenchError::Validation(format!("record id {id:?} cannot be used as a file name")));
    }
    Ok(format!("{id}.{ext}"))
}
