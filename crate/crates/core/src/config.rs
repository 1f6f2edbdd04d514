//! Run configuration shared by the command-line tools, with a stable hash
//! recorded next to every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg_err, Result};
use crate::forward::AccelSpec;
use crate::phantom::{PhantomSpec, SplitSpec};
use crate::pipeline::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub split: SplitSpec,
    /// Number of phantoms generated by `datagen`.
    pub dataset_size: usize,
    pub train: TrainConfig,
    /// Default output directory when no `--out` is given.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            split: SplitSpec::default(),
            dataset_size: 2400,
            train: TrainConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        if self.phantom.extent != self.train.extent {
            return Err(arg_err(
                "config",
                format!("phantom extent {} differs from train extent {}", self.phantom.extent, self.train.extent),
            ));
        }
        if self.dataset_size == 0 {
            return Err(arg_err("config", "dataset_size must be positive"));
        }
        self.split.counts(self.dataset_size)?;
        Ok(())
    }

    pub fn accel_spec(&self) -> Result<AccelSpec> {
        self.train.spec()
    }

    /// Replaces every seed (phantoms, training, evaluation) with values
    /// derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.phantom.seed = crate::seed::derive(seed, &[0]);
        self.train.seed = crate::seed::derive(seed, &[1]);
        self.train.eval_seed = crate::seed::derive(seed, &[2]);
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    artifact: String,
    config_hash: String,
    config: &'a RunConfig,
}

/// Writes `<artifact>.meta.json` holding the resolved config and its hash.
pub fn write_sidecar(artifact: impl AsRef<Path>, cfg: &RunConfig) -> Result<PathBuf> {
    let artifact = artifact.as_ref();
    let name = artifact
        .file_name()
        .ok_or_else(|| arg_err("sidecar", format!("{} has no file name", artifact.display())))?
        .to_string_lossy()
        .into_owned();
    let path = artifact.with_file_name(format!("{name}.meta.json"));
    let body = Sidecar {
        artifact: name,
        config_hash: cfg.hash(),
        config: cfg,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"dataset_size": 10, "extra": true}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 2, "lr_decay": 0.5}}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"dataset_size": 10, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 2);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
        let round: RunConfig = serde_json::from_str(&a.to_json_pretty()).unwrap();
        assert_eq!(round.hash(), a.hash());
    }

    #[test]
    fn mismatched_extents_fail() {
        let mut cfg = RunConfig::default();
        cfg.phantom.extent = 32;
        assert!(cfg.validate().is_err());
    }
}
