//! The run configuration file: a flat JSON object mirroring the CLI flags.
//!
//! Every field has a default except the data/output paths. Precedence is
//! flags over file values over the REFINET_SEED environment variable (seed
//! only) over built-in defaults. The fully resolved config is echoed into
//! the output directory and is itself a valid config file; rerunning from
//! the echo reproduces the run bit for bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::models::Variant;
use crate::training::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("config io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error(transparent)]
    Invalid(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Checkpoint to resume training from (or to evaluate/refine with).
    pub checkpoint: Option<PathBuf>,
    /// None falls back to REFINET_SEED, then 0. The echoed config always
    /// carries the resolved value.
    pub seed: Option<u64>,
    pub gamma: f32,
    pub lambda_k: f32,
    pub lambda_r: f32,
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub target_res: usize,
    pub lowest_res: usize,
    pub variant: Variant,
    pub base_filters: usize,
    pub embedding_dim: usize,
    pub convs_per_block: usize,
    pub injection_mask: Option<Vec<bool>>,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data_dir: None,
            output_dir: None,
            checkpoint: None,
            seed: None,
            gamma: t.weights.gamma,
            lambda_k: t.weights.lambda_k,
            lambda_r: t.weights.lambda_r,
            lr: t.lr,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            target_res: t.target_res,
            lowest_res: t.lowest_res,
            variant: t.variant,
            base_filters: t.base_filters,
            embedding_dim: t.embedding_dim,
            convs_per_block: t.convs_per_block,
            injection_mask: t.injection_mask,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
        }
    }
}

impl RunConfig {
    /// Parse from JSON. Unknown keys are rejected; missing keys default.
    /// The numeric ranges are validated as a training config would be.
    pub fn from_json_str(json: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.to_train_config().validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_json_str(&text)
    }

    /// Fill the seed from the environment-provided value if the file left it
    /// unset.
    pub fn resolve_seed(&mut self, env_seed: Option<u64>) {
        if self.seed.is_none() {
            self.seed = Some(env_seed.unwrap_or(0));
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights {
                gamma: self.gamma,
                lambda_k: self.lambda_k,
                lambda_r: self.lambda_r,
            },
            lr: self.lr,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            seed: self.seed.unwrap_or(0),
            target_res: self.target_res,
            lowest_res: self.lowest_res,
            variant: self.variant,
            base_filters: self.base_filters,
            embedding_dim: self.embedding_dim,
            convs_per_block: self.convs_per_block,
            injection_mask: self.injection_mask.clone(),
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
        }
    }

    pub fn data_dir(&self) -> Result<&Path, ConfigError> {
        self.data_dir.as_deref().ok_or(ConfigError::Missing("data_dir"))
    }

    pub fn output_dir(&self) -> Result<&Path, ConfigError> {
        self.output_dir.as_deref().ok_or(ConfigError::Missing("output_dir"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved config into the output directory.
    pub fn echo_into(&self, output_dir: &Path) -> Result<PathBuf, ConfigError> {
        let path = output_dir.join("config.json");
        let tmp = path.with_extension("json.tmp");
        let io = |source: std::io::Error| ConfigError::Io { path: path.clone(), source };
        std::fs::write(&tmp, self.to_json()).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)?;
        Ok(path)
    }
}
