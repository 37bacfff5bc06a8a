//! Run configuration: preset, then config file, then flags.
//!
//! Config files are flat `key=value` lines whose keys are flag names
//! (`-` and `_` are interchangeable). Blank lines and `#` comments are
//! ignored, so a run manifest is itself a valid config file.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use glfcr::training::TrainConfig;
use glfcr::{DType, ModelConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(format!("unknown preset {s:?} (expected desk or paper)")),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

pub fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

/// Parse a config file into ordered `(key, value)` pairs.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        pairs.push((normalize_key(k), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Fully resolved model and training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dtype: DType,
}

impl Resolved {
    pub fn new(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Desk => (ModelConfig::desk(), TrainConfig::desk()),
            Preset::Paper => (ModelConfig::paper(), TrainConfig::paper()),
        };
        Resolved {
            preset,
            model,
            train,
            dtype: DType::F32,
        }
    }

    /// Apply one setting; unknown keys are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = normalize_key(key);
        if key == "dtype" {
            self.dtype = match value {
                "f32" => DType::F32,
                "f64" => DType::F64,
                _ => return Err(CliError::Usage(format!("dtype must be f32 or f64, got {value:?}"))),
            };
            return Ok(());
        }
        if key == "preset" {
            // Recorded for reference; the preset itself is chosen before any file is read.
            return Ok(());
        }
        if self.model.set(&key, value)? || self.train.set(&key, value)? {
            return Ok(());
        }
        Err(CliError::Usage(format!("unknown config key {key:?}")))
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), CliError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate(self.model.window)?;
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("preset".to_string(), self.preset.name().to_string()),
            ("dtype".to_string(), self.dtype.name().to_string()),
        ];
        out.extend(self.model.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        out.extend(self.train.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }
}

/// `preset < config file < flags`.
pub fn resolve(preset: Preset, file: Option<&Path>, flags: &[(String, String)]) -> Result<Resolved, CliError> {
    let mut r = Resolved::new(preset);
    if let Some(path) = file {
        r.apply(&read_pairs(path)?)?;
    }
    r.apply(flags)?;
    r.validate()?;
    Ok(r)
}
