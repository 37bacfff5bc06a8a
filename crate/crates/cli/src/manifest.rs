//! Run manifest written at the start of every command.
//!
//! Metadata lines start with `#`; the remaining `key=value` lines are the
//! resolved configuration, so the file can be passed back via `--config`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::CliError;

pub const FILE_NAME: &str = "run_manifest.txt";

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub artifacts: Vec<(String, PathBuf)>,
    pub started_unix: u64,
    pub version: &'static str,
    path: PathBuf,
    clock: Instant,
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path, seed: u64, config: Vec<(String, String)>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            artifacts: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            version: env!("CARGO_PKG_VERSION"),
            path: out_dir.join(FILE_NAME),
            clock: Instant::now(),
        }
    }

    pub fn artifact(mut self, name: &str, path: impl Into<PathBuf>) -> Self {
        self.artifacts.push((name.to_string(), path.into()));
        self
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# command: {}", self.command);
        let _ = writeln!(s, "# version: {}", self.version);
        let _ = writeln!(s, "# seed: {}", self.seed);
        let _ = writeln!(s, "# started_unix: {}", self.started_unix);
        for (name, path) in &self.artifacts {
            let _ = writeln!(s, "# artifact.{name}: {}", path.display());
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Create the output directory and write the manifest.
    pub fn write(&self) -> Result<(), CliError> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| glfcr::Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        fs::write(&self.path, self.render()).map_err(|e| glfcr::Error::Io {
            path: self.path.clone(),
            source: e,
        })?;
        Ok(())
    }

    /// Append the wall-clock duration once the command finishes.
    pub fn finish(&self) -> Result<(), CliError> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.path).map_err(|e| glfcr::Error::Io {
            path: self.path.clone(),
            source: e,
        })?;
        writeln!(f, "# elapsed_seconds: {:.3}", self.clock.elapsed().as_secs_f64()).map_err(|e| glfcr::Error::Io {
            path: self.path.clone(),
            source: e,
        })?;
        Ok(())
    }
}
