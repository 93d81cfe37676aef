//! JSON reports, CSV artefacts and the run manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    /// Recorded but not gating.
    #[serde(rename = "info")]
    Info,
}

/// One numeric check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub relation: Relation,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            relation: Relation::AtMost,
            passed: value <= threshold,
        }
    }

    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            relation: Relation::AtLeast,
            passed: value >= threshold,
        }
    }

    pub fn within(name: &str, value: f64, lo: f64, hi: f64) -> [Self; 2] {
        [
            Self::at_least(&format!("{name} (lower)"), value, lo),
            Self::at_most(&format!("{name} (upper)"), value, hi),
        ]
    }

    pub fn info(name: &str, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: f64::NAN,
            relation: Relation::Info,
            passed: true,
        }
    }

    /// A boolean outcome as `value = 0 | 1` against `>= 1`.
    pub fn flag(name: &str, ok: bool) -> Self {
        Self::at_least(name, if ok { 1.0 } else { 0.0 }, 1.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub experiment: String,
    pub config_sha256: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub data: serde_json::Map<String, serde_json::Value>,
}

impl Report {
    pub fn new(experiment: &str, config_sha256: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            config_sha256: config_sha256.into(),
            seed,
            passed: true,
            checks: Vec::new(),
            data: serde_json::Map::new(),
        }
    }

    pub fn check(&mut self, c: Check) {
        self.passed &= c.passed;
        self.checks.push(c);
    }

    pub fn insert<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.data.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

/// Writes the files of one experiment into its own directory.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    prefix: String,
    pub written: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(root: &Path, experiment: &str) -> Result<Self> {
        let dir = root.join(experiment);
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir,
            prefix: experiment.into(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.written.push(Artifact {
            file: format!("{}/{name}", self.prefix),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentEntry {
    pub experiment: String,
    pub passed: bool,
    pub failed_checks: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

/// Everything needed to reproduce a run; contains no timestamps.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub experiments: Vec<ExperimentEntry>,
    pub passed: bool,
}
