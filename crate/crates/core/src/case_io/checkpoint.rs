//! Model checkpoints as a single JSON document.
//!
//! The file holds the weights, the optimizer moments, the number of
//! completed updates and the standardization stats. Floats are written with
//! round-trip precision, so loading reproduces every value bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{Adam, ModelParams};
use crate::graph::StandardizationStats;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: ModelParams,
    pub adam: Adam,
    /// Completed updates; training resumes at `step + 1`.
    pub step: u64,
    pub stats: StandardizationStats,
}

impl Checkpoint {
    pub fn new(params: ModelParams, adam: Adam, step: u64, stats: StandardizationStats) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params,
            adam,
            step,
            stats,
        }
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Write through a temporary file and rename, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, checkpoint)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let probe: VersionProbe = serde_json::from_str(&text)?;
    if probe.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: probe.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.params.check()?;
    Ok(ck)
}
