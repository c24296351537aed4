//! Run configuration: a JSON file carrying every tunable of the pipeline,
//! with command-line flags layered on top. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::path::Path;

use onsetforge::cqt::CqtConfig;
use onsetforge::datagen::DatagenConfig;
use onsetforge::network::TrainConfig;
use onsetforge::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub cqt: CqtConfig,
    pub datagen: DatagenConfig,
    pub train: TrainConfig,
    /// Piano-roll activation threshold for event decoding.
    pub decode_threshold: f64,
    /// Onset matching tolerance in seconds.
    pub eval_tolerance: f64,
    /// Ternary classification thresholds for window evaluation.
    pub ternary_hi: f64,
    pub ternary_lo: f64,
    /// Seed for randomized subcommands (data generation, window sampling).
    pub seed: u64,
    /// Worker threads; 0 means one per available core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cqt: CqtConfig::default(),
            datagen: DatagenConfig::default(),
            train: TrainConfig::default(),
            decode_threshold: 0.8,
            eval_tolerance: 0.050,
            ternary_hi: 0.8,
            ternary_lo: 0.2,
            seed: 0,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.cqt.validate()?;
        self.datagen.validate()?;
        self.train.validate()?;
        for (value, name) in [
            (self.decode_threshold, "decode_threshold"),
            (self.ternary_hi, "ternary_hi"),
            (self.ternary_lo, "ternary_lo"),
        ] {
            if !value.is_finite() || value <= 0.0 || value >= 1.0 {
                return Err(Error::InvalidInput(format!("config: {name} must lie in (0, 1)")));
            }
        }
        if self.ternary_hi <= self.ternary_lo {
            return Err(Error::InvalidInput(
                "config: ternary_hi must exceed ternary_lo".into(),
            ));
        }
        if !self.eval_tolerance.is_finite() || self.eval_tolerance <= 0.0 {
            return Err(Error::InvalidInput("config: eval_tolerance must be > 0".into()));
        }
        Ok(())
    }

    pub fn emit(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("config serialization: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
