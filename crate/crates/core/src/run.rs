//! Resolved run configuration shared by every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Replace `model.output_scale` with the training-label means.
    pub auto_output_scale: bool,
    /// Command name and flags as given on the command line.
    pub command: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            out: None,
            auto_output_scale: true,
            command: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Writes `config.resolved.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json() + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_documents() {
        let mut rc = RunConfig::default();
        rc.train.epochs = 3;
        rc.model.init_seed = 9;
        rc.data = Some("data".into());
        rc.command.insert("cmd".into(), "train".into());
        assert_eq!(RunConfig::from_json(&rc.to_json()).unwrap(), rc);

        let partial = RunConfig::from_json(r#"{"train": {"epochs": 2}, "model": {"init_seed": 4}}"#).unwrap();
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(partial.model.init_seed, 4);
        assert_eq!(partial.model.embed_dims, ModelConfig::default().embed_dims);

        assert!(matches!(RunConfig::from_json(r#"{"modle": {}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("{"), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_file_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let rc = RunConfig::default();
        let path = rc.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), rc);
    }
}
