//! Run manifest: written before any artifact and rewritten whenever an
//! output is added.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Effective settings, `key → value`.
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub build: String,
    pub output_dir: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// `running`, `ok` or `failed: <message>`.
    pub status: String,
    /// Output files relative to `output_dir`, in creation order.
    pub outputs: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("GIBBS_GIT_ID"))
}

/// Output directory of one command together with its manifest.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn begin(command: &str, config: Vec<(String, String)>, seed: u64, dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
        let run = Run {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config,
                seed,
                build: build_id(),
                output_dir: dir.display().to_string(),
                started_unix: now(),
                finished_unix: None,
                status: "running".into(),
                outputs: Vec::new(),
            },
        };
        run.save()?;
        Ok(run)
    }

    fn save(&self) -> Result<(), CliError> {
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        std::fs::rename(&tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Registers `name` in the manifest and returns its path.
    pub fn output(&mut self, name: &str) -> Result<PathBuf, CliError> {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
            self.save()?;
        }
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(path)
    }

    pub fn finish(mut self, result: &Result<(), CliError>) -> Result<(), CliError> {
        self.manifest.finished_unix = Some(now());
        self.manifest.status = match result {
            Ok(()) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.save()
    }
}
