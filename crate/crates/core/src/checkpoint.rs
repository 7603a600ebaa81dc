//! Session-boundary checkpoints: config, pipeline state (model, head,
//! snapshot, memory banks, RNG state, results) and the pseudo-feature log.
//!
//! Stored as JSON; floats use the shortest round-trip representation and
//! are parsed back bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pfs::{audit_pseudo_features, PfsAudit};
use crate::sessions::PipelineState;

pub const CHECKPOINT_FORMAT: &str = "fscil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: Config,
    /// Directory the protocol was loaded from; `None` when generated from the config.
    pub data_dir: Option<PathBuf>,
    pub state: PipelineState,
}

impl Checkpoint {
    pub fn new(config: &Config, data_dir: Option<&Path>, state: &PipelineState) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            data_dir: data_dir.map(Path::to_path_buf),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Schema(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "{}: not a version {CHECKPOINT_VERSION} checkpoint",
                path.display()
            )));
        }
        ck.config.validate()?;
        ck.state.check_frozen()?;
        Ok(ck)
    }

    /// File name used for the checkpoint written after `session`.
    pub fn file_name(session: usize) -> String {
        format!("session-{session}.ckpt.json")
    }
}

/// Re-verifies every logged pseudo-feature; returns per-session audits.
pub fn audit_checkpoint(state: &PipelineState) -> Result<BTreeMap<usize, PfsAudit>> {
    let mut out = BTreeMap::new();
    for log in &state.pfs_logs {
        let audit = audit_pseudo_features(
            &log.records,
            &state.banks,
            &log.head,
            log.threshold,
            log.uncertainty_filter,
            log.per_class,
        )?;
        if audit.fallbacks != log.fallbacks {
            return Err(Error::Consistency(format!(
                "session {}: log reports {} fallbacks but records hold {}",
                log.session, log.fallbacks, audit.fallbacks
            )));
        }
        out.insert(log.session, audit);
    }
    Ok(out)
}
