//! Run configuration: every knob of a training or inference run in one TOML
//! document, with dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionConfig;
use crate::data::PatchProtocol;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::losses::LossConfig;
use crate::metrics::BettiConfig;
use crate::model::ModelConfig;
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMethod {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            method: OptimizerMethod::Adam,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 8,
            epochs: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; relative paths inside it resolve against its folder.
    pub manifest: PathBuf,
    /// Channels fed to the texture network; images are converted to match.
    pub image_channels: usize,
    /// Share of the training samples held out for checkpoint selection when
    /// the manifest marks no `val` samples.
    pub val_fraction: f64,
    /// Run validation every this many epochs (the final epoch always runs).
    pub val_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.toml"),
            image_channels: 1,
            val_fraction: 0.1,
            val_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data order, crops and corruption draws.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub corruption: CorruptionConfig,
    pub fusion: FusionConfig,
    pub betti: BettiConfig,
    pub patches: PatchProtocol,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            corruption: CorruptionConfig::default(),
            fusion: FusionConfig::default(),
            betti: BettiConfig::default(),
            patches: PatchProtocol::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.corruption.validate()?;
        self.fusion.validate()?;
        self.betti.validate()?;
        self.patches.validate()?;
        self.optimizer.validate()?;
        if !matches!(self.data.image_channels, 1 | 3) {
            return Err(Error::Config(format!("image_channels {} must be 1 or 3", self.data.image_channels)));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.data.val_fraction)));
        }
        if self.data.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        let stride = 1usize << self.model.depth;
        for (name, v) in [("train_crop", self.patches.train_crop), ("test_window", self.patches.test_window)] {
            if v % stride != 0 {
                return Err(Error::Config(format!("{name} {v} must be a multiple of the network stride {stride}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Applies `section.key=value` overrides. Values parse as TOML literals
    /// and fall back to plain strings, so `output_dir=runs/a` needs no quotes.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            let value = parse_literal(value.trim());
            let mut node = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
                if i + 1 == parts.len() {
                    // optional fields are absent from the serialized form
                    table.insert((*part).to_string(), value.clone());
                    break;
                }
                node = table
                    .get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown config section `{part}` in `{key}`")))?;
            }
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid override: {e}")))?;
        Ok(cfg)
    }
}

fn parse_literal(text: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {text}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| toml::Value::String(text.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::CorruptionOrder;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn documented_defaults() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.fusion.omega, cfg.loss.tau), (0.5, 0.1));
        assert_eq!((cfg.corruption.lambda_start, cfg.corruption.lambda_end), (0.5, 0.1));
        assert_eq!((cfg.optimizer.learning_rate, cfg.optimizer.batch_size, cfg.optimizer.epochs), (1e-3, 8, 100));
        assert_eq!(cfg.patches, PatchProtocol { train_crop: 256, test_window: 128, test_stride: 64 });
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "fusion.omega=1",
                "optimizer.epochs=3",
                "output_dir=runs/x",
                "corruption.order=false-then-missed",
                "loss.cldice_alpha=0.3",
                "seed = 9",
            ])
            .unwrap();
        assert_eq!(cfg.fusion.omega, 1.0);
        assert_eq!(cfg.optimizer.epochs, 3);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/x"));
        assert_eq!(cfg.corruption.order, CorruptionOrder::FalseThenMissed);
        assert_eq!(cfg.loss.cldice_alpha, Some(0.3));
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let base = RunConfig::default();
        assert!(base.with_overrides(&["fusion.omegaa=1"]).is_err());
        assert!(base.with_overrides(&["nosection.x=1"]).is_err());
        assert!(base.with_overrides(&["optimizer.epochs=many"]).is_err());
        assert!(base.with_overrides(&["seed"]).is_err());
        let bad = base.with_overrides(&["fusion.omega=2"]).unwrap();
        assert!(bad.validate().is_err());
        let odd = base.with_overrides(&["patches.train_crop=100"]).unwrap();
        assert!(odd.validate().is_err());
    }
}
