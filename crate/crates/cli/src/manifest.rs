//! Output directory bookkeeping.
//!
//! Every file a command produces goes through one [`ArtifactWriter`], which
//! records its sha256. The manifest lists those digests, the digests of the
//! inputs, the config and every seed, and carries no timestamps, so two runs
//! of the same config give byte-identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{runtime, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Serialized writes into one output directory.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    written: Mutex<BTreeMap<String, String>>,
}

impl ArtifactWriter {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, CliError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| runtime(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root,
            written: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` (forward slashes) and returns its digest.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<String, CliError> {
        let mut written = self.written.lock().expect("writer lock");
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        }
        fs::write(&path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let digest = sha256_hex(bytes);
        written.insert(rel.to_string(), digest.clone());
        Ok(digest)
    }

    /// Renders with `f` into memory, then writes.
    pub fn write_with<E: std::fmt::Display>(
        &self,
        rel: &str,
        f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> Result<String, CliError> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| runtime(format!("{rel}: {e}")))?;
        self.write(rel, &buf)
    }

    pub fn artifacts(&self) -> BTreeMap<String, String> {
        self.written.lock().expect("writer lock").clone()
    }

    /// Writes the manifest last, with the artifact table filled in.
    pub fn finish(&self, mut manifest: ExperimentManifest) -> Result<ExperimentManifest, CliError> {
        manifest.artifacts = self.artifacts();
        let mut json = serde_json::to_vec_pretty(&manifest).map_err(runtime)?;
        json.push(b'\n');
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, json).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SeedRegistry {
    pub base: u64,
    /// Member seeds per strategy name; baselines are absent.
    pub members: BTreeMap<String, Vec<u64>>,
    /// Seed of the bootstrap draws, for ensemble studies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub strategy: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    /// sha256 of the config file as read.
    pub config_digest: String,
    pub seeds: SeedRegistry,
    /// Config-relative input path to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output-relative artifact path to sha256.
    pub artifacts: BTreeMap<String, String>,
    pub failures: Vec<Failure>,
}

impl ExperimentManifest {
    pub fn new(command: &str, config: RunConfig, config_digest: String) -> Self {
        let base = config.seed;
        Self {
            tool: "dslq".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            config_digest,
            seeds: SeedRegistry {
                base,
                ..SeedRegistry::default()
            },
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            failures: Vec::new(),
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<ExperimentManifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Checks that every artifact listed in `dir/manifest.json` exists with the
/// recorded digest.
pub fn verify_manifest(dir: &Path) -> Result<ExperimentManifest, CliError> {
    let manifest = read_manifest(dir)?;
    for (rel, digest) in &manifest.artifacts {
        let actual = file_digest(&dir.join(rel))?;
        if &actual != digest {
            return Err(CliError::Runtime(format!("{rel}: digest {actual} does not match manifest {digest}")));
        }
    }
    Ok(manifest)
}
