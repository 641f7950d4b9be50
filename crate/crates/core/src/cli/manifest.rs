//! `manifest.json` in the run directory: resolved configuration and the
//! sha256 of every artifact written so far.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    /// Resolved configuration as TOML text.
    pub config: String,
    /// Commands run in this directory, in order.
    pub commands: Vec<String>,
    /// Relative path to hex sha256.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn load_or_default(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Records a command and the files it wrote, then rewrites the manifest.
    pub fn record(
        run_dir: &Path,
        cfg: &RunConfig,
        command: &str,
        files: &[&str],
    ) -> Result<(), CliError> {
        let mut m = Self::load_or_default(run_dir)?;
        m.config = cfg.to_toml();
        m.commands.push(command.to_string());
        for f in files {
            m.files
                .insert((*f).to_string(), sha256_file(&run_dir.join(f))?);
        }
        let path = run_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}
