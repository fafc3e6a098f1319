//! Run manifests: resolved flags, seeds and input checksums, enough to
//! replay a run exactly.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub permutation: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: C,
    pub seeds: Seeds,
    pub wallclock: bool,
    pub data: Vec<DataFile>,
    /// Files written by the run, relative to its directory.
    pub outputs: Vec<String>,
    /// Filled in once the run has finished.
    pub result: Option<serde_json::Value>,
}

impl<C: Serialize + for<'de> Deserialize<'de>> Manifest<C> {
    pub fn new(command: &str, config: C, seeds: Seeds, wallclock: bool, data: Vec<DataFile>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seeds,
            wallclock,
            data,
            outputs: Vec::new(),
            result: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(dir.join(MANIFEST_FILE), text).with_context(|| format!("writing manifest in {}", dir.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Fails unless every recorded input still has the recorded checksum.
    pub fn verify_data(&self) -> Result<()> {
        for f in &self.data {
            let now = checksum(&f.path)?;
            if now.sha256 != f.sha256 {
                bail!(
                    "data file {} changed since the manifest was written (sha256 {} != {})",
                    f.path.display(),
                    now.sha256,
                    f.sha256
                );
            }
        }
        Ok(())
    }
}

pub fn checksum(path: &Path) -> Result<DataFile> {
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let bytes = io::copy(&mut file, &mut hasher).with_context(|| format!("reading {}", path.display()))?;
    Ok(DataFile {
        path: path.to_path_buf(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

pub fn checksums(paths: &[PathBuf]) -> Result<Vec<DataFile>> {
    paths.iter().map(|p| checksum(p)).collect()
}
