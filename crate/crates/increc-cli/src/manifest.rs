//! Per-stage run manifests: the config snapshot, seed, input and output
//! file hashes, and stage metadata. Downstream stages verify upstream
//! hashes before using an artifact, so a report can always be traced to the
//! exact bytes that produced it. Manifests carry no timestamps; a rerun
//! with identical inputs writes identical bytes (timings go to stderr).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pipeline::PipelineError;

type Result<T> = std::result::Result<T, PipelineError>;

pub fn sha256_file(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|_| PipelineError::MissingInput(path.to_path_buf()))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(PipelineError::Io)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileHash {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub meta: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(stage: &str, seed: u64, config: &BTreeMap<String, String>) -> Self {
        RunManifest {
            stage: stage.to_string(),
            seed,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, dir: &Path, name: &str) -> Result<()> {
        let sha = sha256_file(&dir.join(name))?;
        self.inputs.push(FileHash {
            name: name.to_string(),
            sha256: sha,
        });
        Ok(())
    }

    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let sha = sha256_file(&dir.join(name))?;
        self.outputs.push(FileHash {
            name: name.to_string(),
            sha256: sha,
        });
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn output_hash(&self, name: &str) -> Option<&str> {
        self.outputs
            .iter()
            .find(|f| f.name == name)
            .map(|f| f.sha256.as_str())
    }

    pub fn input_hash(&self, name: &str) -> Option<&str> {
        self.inputs
            .iter()
            .find(|f| f.name == name)
            .map(|f| f.sha256.as_str())
    }

    pub fn file_name(stage: &str) -> String {
        format!("{stage}.manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::file_name(&self.stage));
        let mut file = File::create(&path).map_err(PipelineError::Io)?;
        serde_json::to_writer_pretty(&mut file, self)
            .map_err(|e| PipelineError::Config(format!("manifest serialization: {e}")))?;
        file.write_all(b"\n").map_err(PipelineError::Io)?;
        Ok(())
    }

    pub fn load(dir: &Path, stage: &str) -> Result<RunManifest> {
        let path = dir.join(Self::file_name(stage));
        let file = File::open(&path).map_err(|_| PipelineError::MissingInput(path.clone()))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| PipelineError::Chain(format!("{}: {e}", path.display())))
    }

    /// Verify that a file on disk matches the hash this manifest recorded
    /// as its output.
    pub fn verify_output(&self, dir: &Path, name: &str) -> Result<()> {
        let want = self.output_hash(name).ok_or_else(|| {
            PipelineError::Chain(format!(
                "{} manifest does not list output `{name}`",
                self.stage
            ))
        })?;
        let got = sha256_file(&dir.join(name))?;
        if got != want {
            return Err(PipelineError::Chain(format!(
                "`{name}` does not match the {} manifest (expected {want}, found {got})",
                self.stage
            )));
        }
        Ok(())
    }
}

/// Run directory for one (config, seed): `<out>/<confighash>-s<seed>`.
pub fn run_dir(out: &Path, hash8: &str, seed: u64) -> PathBuf {
    out.join(format!("{hash8}-s{seed}"))
}
