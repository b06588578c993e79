//! Run configuration: one TOML file describing every stage of an
//! experiment. The config hash is the SHA-256 of the canonical JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::AeTrainConfig;
use crate::env::{EnvConfig, JudgeConfig};
use crate::error::{Error, Result};
use crate::policy::PolicyTrainConfig;
use crate::preprocess::NoiseSigmas;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Model rate; recorded episodes are resampled to it.
    pub target_rate: u32,
    pub clip_bound: f64,
    pub horizon: usize,
    pub noise: NoiseSigmas,
    /// Demonstrations held out for best-epoch selection.
    pub validation_episodes: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_rate: 10, clip_bound: 1000.0, horizon: 2, noise: NoiseSigmas::default(), validation_episodes: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeSection {
    pub latent_dim: usize,
    pub whole_hidden: Vec<usize>,
    pub thumb_hidden: Vec<usize>,
    pub train: AeTrainConfig,
}

impl Default for AeSection {
    fn default() -> Self {
        let train = AeTrainConfig { epochs: 1000, ..AeTrainConfig::default() };
        Self { latent_dim: 10, whole_hidden: vec![64, 32], thumb_hidden: vec![16], train }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden_size: usize,
    pub attention_hidden: usize,
    /// Constraint strength of the constrained models.
    pub gamma: f64,
    /// Loss weight on the finger-base lateral and thumb joints.
    pub emphasis_weight: f64,
    pub train: PolicyTrainConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        let mut train = PolicyTrainConfig { epochs: 500, ..PolicyTrainConfig::default() };
        train.optimizer.learning_rate = 3e-3;
        Self { hidden_size: 64, attention_hidden: 32, gamma: 0.1, emphasis_weight: 2.0, train }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub judge: JudgeConfig,
    /// Concurrent rollouts.
    pub jobs: usize,
    /// Seeds of the ablation repeats.
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { judge: JudgeConfig::default(), jobs: 1, seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub env: EnvConfig,
    pub preprocess: PreprocessConfig,
    pub autoencoder: AeSection,
    pub policy: PolicySection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/default".into(),
            env: EnvConfig::default(),
            preprocess: PreprocessConfig::default(),
            autoencoder: AeSection::default(),
            policy: PolicySection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Full-size hand (16 joints, 368 taxels), wide encoders and long training.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.env.joints = 16;
        c.env.taxel_rows = 46;
        c.autoencoder.whole_hidden = vec![512, 128];
        c.autoencoder.thumb_hidden = vec![64];
        c.autoencoder.train.epochs = 50_000;
        c.policy.train.epochs = 50_000;
        c.policy.train.optimizer.learning_rate = 1e-3;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let p = &self.preprocess;
        if p.target_rate == 0 || self.env.sim_rate % p.target_rate != 0 {
            return Err(Error::Config("preprocess.target_rate must divide env.sim_rate".into()));
        }
        if p.target_rate != self.env.control_rate {
            return Err(Error::Config("preprocess.target_rate must equal env.control_rate".into()));
        }
        if p.horizon == 0 || !(p.clip_bound > 0.0) {
            return Err(Error::Config("horizon and clip_bound must be positive".into()));
        }
        if !(self.policy.gamma >= 0.0 && self.policy.gamma.is_finite()) {
            return Err(Error::Config("policy.gamma must be finite and nonnegative".into()));
        }
        if self.eval.jobs == 0 || self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.jobs and eval.seeds must be non-empty".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of arbitrary content.
pub fn content_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_preserves_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_files_use_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[policy]\ngamma = 0.5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.policy.gamma, 0.5);
        assert_eq!(c.policy.hidden_size, 64);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml("[policy]\ngamma = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[preprocess]\ntarget_rate = 7\n").is_err());
        assert!(RunConfig::from_toml("unknown_key = 1\n").is_err());
    }

    #[test]
    fn paper_scale_dimensions() {
        let c = RunConfig::paper_scale();
        c.validate().unwrap();
        assert_eq!(c.env.tactile_layout().whole_dim(), 1104);
        assert_eq!(c.env.joints, 16);
    }
}
