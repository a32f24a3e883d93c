//! Run directories: every file a run writes is listed, with its SHA-256, in
//! `checksums.sha256` (the `sha256sum` format). That index is written last,
//! so its presence marks a complete run.

use std::path::{Path, PathBuf};

use s2rl_core::datastore::DataError;
use s2rl_core::orchestrator::{EvalRecord, RunManifest};
use sha2::{Digest, Sha256};

use crate::{io_err, plot, CliError};

pub const CHECKSUMS: &str = "checksums.sha256";
pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// First 12 hex digits of the SHA-256 of a JSON value; used as a cache key.
pub fn short_hash(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())[..12].to_string()
}

pub struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    /// Opens `dir` for writing; an existing index is removed first so that an
    /// interrupted rewrite never looks complete.
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let index = dir.join(CHECKSUMS);
        if index.exists() {
            std::fs::remove_file(&index).map_err(|e| io_err(&index, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, text: String) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes a binary artifact through one of the checkpoint writers.
    pub fn save(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<(), DataError>) -> Result<(), CliError> {
        f(&self.dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn save_with(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<(), CliError>) -> Result<(), CliError> {
        f(&self.dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn plot(&mut self, name: &str, evals: &[EvalRecord]) -> Result<(), CliError> {
        if evals.is_empty() {
            return Ok(());
        }
        let series = ["sim_return", "real_return", "sum"]
            .iter()
            .enumerate()
            .map(|(i, n)| plot::Series {
                name: n.to_string(),
                points: evals
                    .iter()
                    .map(|r| (r.iteration as f64, [r.sim_return, r.real_return, r.sum][i]))
                    .filter(|p| p.1.is_finite())
                    .collect(),
            })
            .collect::<Vec<_>>();
        let title = self.dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        self.write(name, plot::line_chart(&title, "iteration", &series))
    }

    /// Writes the manifest (listing every output) and then the index.
    pub fn finish(mut self, mut manifest: RunManifest) -> Result<PathBuf, CliError> {
        let mut outputs = self.files.clone();
        outputs.push(MANIFEST.to_string());
        outputs.sort();
        manifest.outputs = outputs.clone();
        self.write(MANIFEST, manifest.to_json())?;
        let mut index = String::new();
        for name in &outputs {
            let path = self.dir.join(name);
            let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            index.push_str(&format!("{}  {name}\n", sha256_hex(&bytes)));
        }
        let path = self.dir.join(CHECKSUMS);
        std::fs::write(&path, index).map_err(|e| io_err(&path, e))?;
        Ok(self.dir)
    }

    /// True when the index exists and every listed file matches it.
    pub fn is_complete(dir: &Path) -> bool {
        verify(dir).unwrap_or(false)
    }
}

/// Checks every entry of a run's checksum index.
pub fn verify(dir: &Path) -> Result<bool, CliError> {
    let index_path = dir.join(CHECKSUMS);
    if !index_path.exists() {
        return Ok(false);
    }
    let index = std::fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    for line in index.lines().filter(|l| !l.is_empty()) {
        let Some((hash, name)) = line.split_once("  ") else {
            return Ok(false);
        };
        match std::fs::read(dir.join(name)) {
            Ok(bytes) if sha256_hex(&bytes) == hash => {}
            _ => return Ok(false),
        }
    }
    Ok(true)
}
