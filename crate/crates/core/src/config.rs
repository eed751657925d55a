//! One JSON document describing a whole run: data generation, model and
//! training. Every section is optional and falls back to its defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CcnnConfig;
use crate::shots::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the synthetic data generator.
    pub data_seed: u64,
    pub synth: SynthConfig,
    pub model: CcnnConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if (self.model.step_s - self.synth.step_s).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "model.step_s {} differs from synth.step_s {}",
                self.model.step_s, self.synth.step_s
            )));
        }
        Ok(())
    }
}
