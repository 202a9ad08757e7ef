//! Run configuration: one TOML document covering the model, the stage
//! switches, and every stage's knobs, with a single master seed.
//!
//! Seed precedence (highest wins): `--seed` flag, then the `LORAM_SEED`
//! environment variable, then the config file, then the default. The
//! resolved master seed fans out to deterministic per-stage seeds, so one
//! number pins the entire pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loram::{PipelineConfig, PruneConfig, QuantConfig, StageFlags, TrainConfig};
use crate::model::ModelConfig;

/// Name of the environment variable that overrides the config-file seed.
pub const SEED_ENV: &str = "LORAM_SEED";

/// Stage-seed salts: distinct deterministic streams per concern.
const ALIGN_SEED_SALT: u64 = 1;
const SFT_SEED_SALT: u64 = 2;
const PRUNE_SEED_SALT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; per-stage seeds are derived from it on resolution.
    pub seed: u64,
    /// Evaluation window length.
    pub eval_seq_len: usize,
    pub model: ModelConfig,
    pub stages: StageFlags,
    pub prune: PruneConfig,
    pub align: TrainConfig,
    pub sft: TrainConfig,
    pub quant: QuantConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            eval_seq_len: 48,
            model: ModelConfig::default(),
            stages: StageFlags::default(),
            prune: PruneConfig::default(),
            align: TrainConfig::default(),
            sft: TrainConfig::default(),
            quant: QuantConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    /// The fully-resolved document echoed into artifacts and logs.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    /// Apply seed precedence and fan the master seed out to the stages.
    /// `env_seed` is the raw `LORAM_SEED` value if set; `flag_seed` is the
    /// `--seed` CLI flag if given.
    pub fn resolve_seed(mut self, env_seed: Option<&str>, flag_seed: Option<u64>) -> Result<RunConfig> {
        if let Some(raw) = env_seed {
            self.seed = raw
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{raw}'")))?;
        }
        if let Some(s) = flag_seed {
            self.seed = s;
        }
        self.model.seed = self.seed;
        self.prune.seed = self.seed.wrapping_add(PRUNE_SEED_SALT);
        self.align.seed = self.seed.wrapping_add(ALIGN_SEED_SALT);
        self.sft.seed = self.seed.wrapping_add(SFT_SEED_SALT);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stages.validate()?;
        self.align.validate()?;
        self.sft.validate()?;
        if self.eval_seq_len < 2 || self.eval_seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "eval_seq_len {} must lie in [2, max_seq {}]",
                self.eval_seq_len, self.model.max_seq
            )));
        }
        Ok(())
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            stages: self.stages,
            prune: self.prune.clone(),
            align: self.align,
            sft: self.sft,
            quant: self.quant,
        }
    }
}
