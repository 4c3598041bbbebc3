//! One merged run configuration covering the whole pipeline, serialized as
//! a single JSON document. Every field has a default; unknown keys are
//! rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::heads::AslConfig;
use crate::labelgraph::GroupingConfig;
use crate::datagen::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grouping: GroupingConfig,
    pub encoder: EncoderConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub asl: AslConfig,
    pub expert_hidden: usize,
    pub metric_threshold: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grouping.validate()?;
        self.encoder.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        self.asl.validate()?;
        if self.expert_hidden == 0 {
            return Err(crate::error::Error::InvalidConfig(
                "expert_hidden must be >= 1".into(),
            ));
        }
        if !(self.metric_threshold > 0.0 && self.metric_threshold < 1.0) {
            return Err(crate::error::Error::InvalidConfig(
                "metric_threshold must be in (0,1)".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl Default for RunConfig {
    /// Defaults wired together: the grouping group count follows the
    /// synthetic task's planted structure.
    fn default() -> Self {
        Self {
            grouping: GroupingConfig {
                n_groups: 3,
                ..GroupingConfig::default()
            },
            encoder: EncoderConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            asl: AslConfig::default(),
            expert_hidden: 5,
            metric_threshold: 0.5,
        }
    }
}
