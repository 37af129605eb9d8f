use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const RUN_LOG: &str = "run.json";

/// Per-stage record written next to the stage's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub stage: String,
    pub config_hash: String,
    /// Seconds.
    pub wall_time: f64,
    /// SHA-256 of every artifact, keyed by path relative to the stage dir.
    pub output_digests: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Digests of all files under `dir` except run logs.
pub fn dir_digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf());
            CliError::io(path, e.into())
        })?;
        if !entry.file_type().is_file() || entry.file_name() == RUN_LOG {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path());
        let key = rel.to_string_lossy().replace('\\', "/");
        out.insert(key, file_digest(entry.path())?);
    }
    Ok(out)
}

/// Short content hash of a stage's inputs.
pub fn config_hash(key: &serde_json::Value) -> String {
    sha256_hex(key.to_string().as_bytes())[..16].to_string()
}

/// A content-addressed stage directory `<out>/<name>/<hash>`.
#[derive(Debug, Clone)]
pub struct Stage {
    pub name: &'static str,
    pub hash: String,
    pub dir: PathBuf,
}

impl Stage {
    pub fn new(out: &Path, name: &'static str, key: serde_json::Value) -> Self {
        let hash = config_hash(&key);
        let dir = out.join(name).join(&hash);
        Stage { name, hash, dir }
    }

    /// A stage whose artifacts live at a fixed location.
    pub fn at(dir: PathBuf, name: &'static str, key: serde_json::Value) -> Self {
        Stage {
            name,
            hash: config_hash(&key),
            dir,
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(RUN_LOG)
    }

    pub fn is_complete(&self) -> bool {
        self.log_path().is_file()
    }

    /// Errors unless the stage has finished; `command` names the
    /// subcommand that produces it.
    pub fn require(&self, command: &'static str) -> Result<RunLog> {
        let path = self.log_path();
        if !path.is_file() {
            return Err(CliError::MissingStage {
                stage: command,
                what: format!("{} output {}", self.name, self.hash),
                path,
            });
        }
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| {
            corrsig::Error::Data(format!("{}: corrupt run log: {e}", path.display())).into()
        })
    }

    /// Clears any previous attempt and creates the directory.
    pub fn begin(&self) -> Result<()> {
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        }
        fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))
    }

    /// Digests the artifacts and writes the run log.
    pub fn finish(&self, started: Instant) -> Result<RunLog> {
        let log = RunLog {
            stage: self.name.to_string(),
            config_hash: self.hash.clone(),
            wall_time: started.elapsed().as_secs_f64(),
            output_digests: dir_digests(&self.dir)?,
        };
        let mut bytes = serde_json::to_vec_pretty(&log).map_err(corrsig::Error::from)?;
        bytes.push(b'\n');
        let path = self.log_path();
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        log::info!(
            "{} {} finished in {:.1}s ({} artifacts) -> {}",
            self.name,
            self.hash,
            log.wall_time,
            log.output_digests.len(),
            self.dir.display()
        );
        Ok(log)
    }
}
