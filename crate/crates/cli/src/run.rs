//! Run directories: every command except `gen-data` writes into a fresh directory
//! holding `config.json` (the fully resolved config) and `run.json` (the invocation).

use std::fs;
use std::path::{Path, PathBuf};

use albedo_core::pipeline::PipelineConfig;
use albedo_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const RUN_RECORD_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const RECORD_FILE: &str = "run.json";

/// How the run was invoked. Replays reparse `argv` from `cwd` and take the config
/// from the snapshot instead of the original flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
}

impl RunRecord {
    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RECORD_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: RunRecord = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if record.version != RUN_RECORD_VERSION {
            return Err(Error::Version {
                path,
                expected: RUN_RECORD_VERSION,
                found: record.version,
            }
            .into());
        }
        Ok(record)
    }
}

fn is_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_none()).unwrap_or(false)
}

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Uses `explicit` when given, otherwise the first free `<root>/<command>-NNNN`.
    /// An existing directory must be empty.
    pub fn create(explicit: Option<&Path>, root: &Path, command: &str) -> CliResult<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => (1..)
                .map(|i| root.join(format!("{command}-{i:04}")))
                .find(|p| !p.exists())
                .expect("unbounded search"),
        };
        if path.exists() && !is_empty_dir(&path) {
            return Err(CliError::Usage(format!(
                "run directory {} already exists and is not empty",
                path.display()
            )));
        }
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir { root: path })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_snapshot(&self, cfg: &PipelineConfig, record: &RunRecord) -> CliResult<()> {
        self.write_text(CONFIG_FILE, &cfg.to_json())?;
        self.write_json(RECORD_FILE, record)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let path = self.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e).into())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        self.write_text(name, &serde_json::to_string_pretty(value).expect("serializable"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_directories_skip_existing_ones() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(None, root.path(), "train").unwrap();
        let b = RunDir::create(None, root.path(), "train").unwrap();
        assert!(a.path().ends_with("train-0001"));
        assert!(b.path().ends_with("train-0002"));
    }

    #[test]
    fn non_empty_explicit_directory_is_refused() {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("x"), "1").unwrap();
        let err = RunDir::create(Some(root.path()), root.path(), "eval").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
