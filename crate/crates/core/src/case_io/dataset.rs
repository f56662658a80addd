//! Line-delimited JSON dataset records.
//!
//! Each line holds one [`Example`]: the grid, an optional solution and
//! generation metadata. Field names follow the dataset feature names
//! (`base_kv`, `bus_type`, `vmin`, ..., `va`, `vm`, `pg`, `qg`, `pf`, `qf`,
//! `pt`, `qt`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, OpfSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Perturbation {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "LOAD_ONLY")]
    LoadOnly,
    #[serde(rename = "LOAD_AND_DROP")]
    LoadAndDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentKind {
    #[serde(rename = "GENERATOR")]
    Generator,
    #[serde(rename = "BRANCH")]
    Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub kind: ComponentKind,
    pub id: usize,
    /// The generator coin came up but no eligible generator existed, so a
    /// branch was dropped instead.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub source_case: String,
    pub perturbation: Perturbation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<Dropped>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub grid: Grid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<OpfSolution>,
    pub meta: ExampleMeta,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        if self.meta.perturbation == Perturbation::LoadAndDrop && self.meta.dropped.is_none() {
            return Err(Error::InvalidGrid("LOAD_AND_DROP example without a dropped component".into()));
        }
        self.grid.topology()?;
        if let Some(s) = &self.solution {
            s.check_shape(&self.grid)?;
        }
        Ok(())
    }
}

/// Serialize one example as a single JSON line (no trailing newline).
pub fn write_example(example: &Example) -> Result<String> {
    Ok(serde_json::to_string(example)?)
}

/// Parse one JSON record. `line` is only used for error messages.
pub fn read_example(record: &str, line: usize) -> Result<Example> {
    let example: Example = serde_json::from_str(record).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    example.validate().map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    Ok(example)
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        w.write_all(write_example(ex)?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(read_example(&line, i + 1)?);
    }
    Ok(out)
}
