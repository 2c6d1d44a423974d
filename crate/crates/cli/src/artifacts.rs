//! Output directory bookkeeping: atomic writes and a manifest of which
//! config hash produced each file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::CliError;

pub const MANIFEST: &str = "artifacts.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub command: String,
    pub config_hash: String,
    pub written_at_unix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub artifacts: BTreeMap<String, Entry>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes `bytes` to `path` through a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::Failure(format!("cannot write {}: {e}", path.display()));
    let mut tmp = NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// One command's view of the output directory.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    command: String,
    hash: String,
    manifest: Manifest,
}

impl Store {
    /// Opens `dir` and checks that none of `names` was written under another
    /// config hash. With `force` such files are overwritten.
    pub fn open(dir: &Path, command: &str, hash: &str, names: &[String], force: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Failure(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Failure(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("corrupt manifest {}: {e}", path.display())))?
        } else {
            Manifest {
                schema_version: SCHEMA_VERSION,
                artifacts: BTreeMap::new(),
            }
        };
        if !force {
            for name in names {
                if let Some(old) = manifest.artifacts.get(name) {
                    if old.config_hash != hash && dir.join(name).exists() {
                        return Err(CliError::Config(format!(
                            "{name} was written by a different config ({}); pass --force to overwrite",
                            &old.config_hash[..12.min(old.config_hash.len())]
                        )));
                    }
                }
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            hash: hash.to_string(),
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        self.manifest.artifacts.insert(
            name.to_string(),
            Entry {
                command: self.command.clone(),
                config_hash: self.hash.clone(),
                written_at_unix: now_unix(),
            },
        );
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("summaries serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}
