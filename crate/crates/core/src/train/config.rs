//! Run configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be a
//! field of [`RunConfig`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{Dims, ModelConfig, Preset};

pub const PUBLISHED_LR: (f64, f64) = (5e-5, 7e-5);
pub const PUBLISHED_WEIGHT_DECAY: (f64, f64) = (1e-3, 3e-3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    /// Optimizer settings restricted to the published ranges.
    Published,
    #[default]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub clip_max_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::Custom,
            lr_max: 6e-5,
            lr_min: 0.0,
            weight_decay: 2e-3,
            epochs: 100,
            batch_size: 8,
            label_smoothing: 0.1,
            clip_max_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.recipe == Recipe::Published {
            if !(PUBLISHED_LR.0..=PUBLISHED_LR.1).contains(&self.lr_max) {
                return fail(format!("lr_max {} outside the published range {PUBLISHED_LR:?}", self.lr_max));
            }
            if !(PUBLISHED_WEIGHT_DECAY.0..=PUBLISHED_WEIGHT_DECAY.1).contains(&self.weight_decay) {
                return fail(format!(
                    "weight_decay {} outside the published range {PUBLISHED_WEIGHT_DECAY:?}",
                    self.weight_decay
                ));
            }
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return fail(format!("need 0 ≤ lr_min ≤ lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.weight_decay < 0.0 {
            return fail(format!("negative weight decay {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.clip_max_norm > 0.0) {
            return fail(format!("clip_max_norm {} must be positive", self.clip_max_norm));
        }
        Ok(())
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub d_pe: usize,
    pub d_ie: usize,
    pub d_hs: usize,
    pub patch: usize,
    pub n_heads: usize,
    pub d_g: Option<usize>,
    pub stem_channels: usize,
    pub image_size: usize,
    pub freeze_stem: bool,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = Dims::toy();
        Self {
            train: TrainConfig::default(),
            d_pe: d.d_pe,
            d_ie: d.d_ie,
            d_hs: d.d_hs,
            patch: d.patch,
            n_heads: d.n_heads,
            d_g: d.d_g,
            stem_channels: d.stem_channels,
            image_size: d.image_size,
            freeze_stem: false,
            train_fraction: 0.77,
            split_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn dims(&self) -> Dims {
        Dims {
            d_pe: self.d_pe,
            d_ie: self.d_ie,
            d_hs: self.d_hs,
            patch: self.patch,
            n_heads: self.n_heads,
            d_g: self.d_g,
            stem_channels: self.stem_channels,
            image_size: self.image_size,
        }
    }

    pub fn model(&self, preset: Preset) -> ModelConfig {
        let mut m = ModelConfig::preset(preset, self.dims());
        m.freeze_stem = self.freeze_stem;
        m
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Map::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            // numbers and booleans parse as JSON, anything else is a string
            let value = serde_json::from_str::<Value>(value)
                .ok()
                .filter(|v| v.is_number() || v.is_boolean() || v.is_null())
                .unwrap_or_else(|| Value::String(value.to_string()));
            if map.insert(key.to_string(), value).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        let Value::Object(known) = serde_json::to_value(RunConfig::default())? else {
            unreachable!("struct serializes to an object")
        };
        if let Some(unknown) = map.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown key {unknown}")));
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Inverse of [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("plain data serializes") else {
            unreachable!("struct serializes to an object")
        };
        map.iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let cfg = RunConfig::parse("# comment\nlr_max = 1e-3\nepochs=5\nfreeze_stem = true\nrecipe = custom\n\n").unwrap();
        assert_eq!(cfg.train.lr_max, 1e-3);
        assert_eq!(cfg.train.epochs, 5);
        assert!(cfg.freeze_stem);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn malformed_lines_and_duplicates_are_errors() {
        assert!(RunConfig::parse("epochs 5").is_err());
        assert!(RunConfig::parse("epochs = 5\nepochs = 6").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
    }

    #[test]
    fn published_recipe_enforces_ranges() {
        assert!(RunConfig::parse("recipe = published").is_ok());
        assert!(RunConfig::parse("recipe = published\nlr_max = 1e-3").is_err());
        assert!(RunConfig::parse("recipe = published\nweight_decay = 0.01").is_err());
        assert!(RunConfig::parse("clip_max_norm = 0").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            d_g: Some(16),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let plain = RunConfig::default();
        assert_eq!(RunConfig::parse(&plain.to_text()).unwrap(), plain);
    }
}
