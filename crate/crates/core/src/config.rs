//! Run configuration file: one TOML document with `[model]`, `[train]`,
//! `[data]` and `[eval]` tables. Omitted keys take their defaults and
//! unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// File name of the echoed configuration inside a run directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Share of the anomalous pool moved into training in weak mode.
    pub anomalous_fraction: f64,
    /// Seed of `synth`; training and weak-label draws use `train.seed`.
    pub synthetic_seed: u64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            anomalous_fraction: 0.02,
            synthetic_seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Full document including defaulted keys.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate().map_err(|e| Error::Config(e.to_string()))?;
        let f = self.data.anomalous_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("data.anomalous_fraction {f} outside (0,1]")));
        }
        Ok(())
    }

    /// Writes the echoed configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ECHO_FILE), self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn defaults_fill_omitted_keys() {
        let cfg = RunConfig::parse("[model]\nmode = \"weak\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.model.mode, Mode::Weak);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.data.anomalous_fraction, 0.02);
    }

    #[test]
    fn unknown_key_is_named() {
        for doc in ["[train]\nepoch = 3\n", "bogus = 1\n", "[data.synthetic]\nnoize = 0.1\n"] {
            let err = RunConfig::parse(doc).unwrap_err();
            let key = doc.split(['\n', '[', ']']).find(|l| l.contains('=')).unwrap().split(' ').next().unwrap();
            assert!(matches!(&err, Error::Config(m) if m.contains(key)), "{err}");
        }
    }

    #[test]
    fn serialize_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_generator = 1.0 / 3.0;
        cfg.train.weights = Some(crate::losses::LossWeights::weak());
        cfg.data.synthetic.defect_area_frac = 0.07;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::parse("[model]\nimage_size = 48\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[data]\nanomalous_fraction = 0.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[data.synthetic]\ndefect_area_frac = 0.5\n"), Err(Error::Config(_))));
    }
}
