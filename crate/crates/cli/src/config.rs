//! Run configuration: one JSON document covering every stage.

use std::fmt;
use std::path::Path;

use maskpolicy_core::metrics::MetricsConfig;
use maskpolicy_core::mim::{LossConfig, ModelConfig};
use maskpolicy_core::policy::PolicyConfig;
use maskpolicy_core::seg::SegConfig;
use maskpolicy_core::trainer::{DataConfig, ProbeConfig, Schedule, TrainConfig};
use maskpolicy_core::volume::PatchGrid;
use serde::{Deserialize, Serialize};

/// Environment variable that replaces every seed in the config.
pub const SEED_ENV: &str = "MASKPOLICY_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub policy: PolicyConfig,
    pub schedule: Schedule,
    pub probe: ProbeConfig,
    pub seg: SegConfig,
    pub metrics: MetricsConfig,
}

/// Every problem found in a config, reported together.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.violations.join("; "))
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `path` (or defaults when `None`), applies the seed override and validates.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
                Self::from_json(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.override_seed(&seed)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn override_seed(&mut self, value: &str) -> anyhow::Result<()> {
        let seed: u64 = value
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("{SEED_ENV}={value:?} is not an unsigned integer"))?;
        self.data.seed = seed;
        self.schedule.seed = seed;
        self.probe.seed = seed;
        Ok(())
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.data.violations();
        let m = &self.model;
        if m.patch_size == 0 || !m.patch_size.is_multiple_of(4) {
            v.push(format!(
                "model.patch_size = {} must be a positive multiple of 4",
                m.patch_size
            ));
        } else if let Err(e) = PatchGrid::new(self.data.shape, 1, m.patch_size) {
            v.push(format!("data.shape / model.patch_size: {e}"));
        }
        if m.embed_dim == 0 {
            v.push("model.embed_dim must be at least 1".into());
        }
        if m.enc_depth == 0 {
            v.push("model.enc_depth must be at least 1".into());
        }
        if m.hog.num_bins < 2 {
            v.push(format!("model.hog.num_bins = {} must be at least 2", m.hog.num_bins));
        }
        if !(m.embed_init_std >= 0.0 && m.embed_init_std.is_finite()) {
            v.push("model.embed_init_std must be finite and >= 0".into());
        }
        for (key, w) in [
            ("loss.lambda_mse", self.loss.lambda_mse),
            ("loss.lambda_hog", self.loss.lambda_hog),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                v.push(format!("{key} = {w} must be finite and >= 0"));
            }
        }
        if !self.loss.enable_mse && !self.loss.enable_hog {
            v.push("loss.enable_mse and loss.enable_hog cannot both be false".into());
        }
        v.extend(self.policy.violations());
        v.extend(self.schedule.violations());
        if !(self.probe.lr >= 0.0 && self.probe.lr.is_finite()) {
            v.push("probe.lr must be finite and >= 0".into());
        }
        v.extend(self.seg.violations());
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations })
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            loss: self.loss,
            policy: self.policy.clone(),
            schedule: self.schedule.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
