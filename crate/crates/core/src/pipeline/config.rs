//! Training and run configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LabelStyle, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{LossSwitches, LossWeights, Setting};
use crate::masking::MissingPolicy;

use super::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    pub weights: LossWeights,
    pub switches: LossSwitches,
    pub policy: MissingPolicy,
    pub setting: Setting,
    pub simsiam_stop_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            patience: 8,
            max_epochs: 50,
            seeds: vec![0, 1, 2],
            weights: LossWeights::MOSI,
            switches: LossSwitches::ALL,
            policy: MissingPolicy::uniform(0.1, 1.0),
            setting: Setting::Incomplete,
            simsiam_stop_gradient: true,
        }
    }
}

impl TrainConfig {
    /// Defaults with the loss weights and training rate range of a label style.
    pub fn for_style(style: LabelStyle) -> Self {
        let (hi, weights) = match style {
            LabelStyle::Mosi => (1.0, LossWeights::MOSI),
            LabelStyle::Sims => (0.5, LossWeights::SIMS),
        };
        TrainConfig {
            weights,
            policy: MissingPolicy::uniform(0.1, hi),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.policy.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Where the feature archive comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Archive(PathBuf),
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Empty means the default grid of the archive's label style.
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rates: Vec::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub n_blocks: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            n_blocks: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Everything one command needs, as read from a run config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
    /// Teacher checkpoint for student training.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Archive(p) = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(t) = &mut cfg.teacher {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::RateMode;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = RunConfig::from_toml(
            r#"
            [data]
            archive = "feats"

            [train]
            max_epochs = 3

            [train.policy]
            mode = "fixed_rate"
            rate = 0.3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.patience, 8);
        assert_eq!(cfg.train.seeds.len(), 3);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.policy.mode, RateMode::FixedRate { rate: 0.3 });
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig {
            data: DataSource::Synth(SynthSpec::new(30, 12, [5, 8, 6], 0.1, 4)),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            ablate: AblateConfig::default(),
            teacher: Some("t".into()),
            out: None,
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = "[data]\narchive = \"x\"\n[train]\npatience = 0\n";
        assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))));
        let unknown = "[data]\narchive = \"x\"\n[train]\nbogus = 1\n";
        assert!(matches!(RunConfig::from_toml(unknown), Err(Error::Config(_))));
    }
}
