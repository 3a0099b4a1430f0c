use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{MIN_HEIGHT, MIN_WIDTH};
use crate::error::{Error, Result};
use crate::ffsr::FfsrConfig;
use crate::masks::{MaskKind, DEFAULT_SIGMA_FRAC};
use crate::rife::RifeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Stage 1: restoration network alone.
    FfsrPretrain,
    /// Stage 2: feature extractor behind a frozen restoration network.
    RifeTrain,
    /// Stage 3: both networks on the joint objective.
    Joint,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::FfsrPretrain => 1,
            Stage::RifeTrain => 2,
            Stage::Joint => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::FfsrPretrain),
            2 => Ok(Stage::RifeTrain),
            3 => Ok(Stage::Joint),
            _ => Err(Error::invalid(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Stage::FfsrPretrain | Stage::RifeTrain => 0.01,
            Stage::Joint => 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dual,
    Single,
}

/// Every knob of a training stage. Loaded from a flat TOML document in
/// which unknown keys are rejected and missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Weight of the extractor loss in the joint objective.
    pub alpha: f64,
    /// Weight of the resolution-weighting terms inside the extractor loss.
    pub beta: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    /// Falls back to the stage default (0.01, 0.01, 0.001) when absent.
    pub initial_lr: Option<f64>,
    /// Learning-rate multiplier applied once half the epochs are done.
    pub lr_drop: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Running-statistics momentum of batch norm.
    pub bn_momentum: f64,
    pub canonical_size: (usize, usize),
    pub seed: u64,
    pub hflip: bool,
    pub mask: MaskKind,
    pub sigma_frac: f64,
    pub variant: Variant,
    pub ffsr_channels: usize,
    pub rife_widths: Vec<usize>,
    pub units_per_block: usize,
    pub stem_channels: usize,
    pub embedding_dim: usize,
    pub weight_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let f = FfsrConfig::default();
        let r = RifeConfig::default();
        Self {
            stage: Stage::FfsrPretrain,
            alpha: 1.0,
            beta: r.beta,
            epochs_per_stage: 20,
            batch_size: 16,
            initial_lr: None,
            lr_drop: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_momentum: 0.1,
            canonical_size: f.canonical_size,
            seed: 0,
            hflip: false,
            mask: MaskKind::Gaussian,
            sigma_frac: DEFAULT_SIGMA_FRAC,
            variant: Variant::Dual,
            ffsr_channels: f.base_channels,
            rife_widths: r.widths,
            units_per_block: r.units_per_block,
            stem_channels: r.stem_channels,
            embedding_dim: r.embedding_dim,
            weight_hidden: r.weight_hidden,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("alpha ({}) and beta ({}) must be finite and >= 0", self.alpha, self.beta));
        }
        if self.epochs_per_stage < 1 || self.batch_size < 1 {
            return fail("epochs_per_stage and batch_size must be at least 1".into());
        }
        if let Some(lr) = self.initial_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("initial_lr {lr} must be positive"));
            }
        }
        if !(self.lr_drop > 0.0 && self.lr_drop <= 1.0) {
            return fail(format!("lr_drop {} outside (0, 1]", self.lr_drop));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return fail(format!("bn_momentum {} outside (0, 1]", self.bn_momentum));
        }
        let (h, w) = self.canonical_size;
        if h < MIN_HEIGHT || w < MIN_WIDTH {
            return fail(format!("canonical size {h}x{w} is below {MIN_HEIGHT}x{MIN_WIDTH}"));
        }
        if !(self.sigma_frac > 0.0 && self.sigma_frac.is_finite()) {
            return fail(format!("sigma_frac {} must be positive", self.sigma_frac));
        }
        self.ffsr_config().validate()?;
        self.rife_config(2).validate()
    }

    pub fn base_lr(&self) -> f64 {
        self.initial_lr.unwrap_or_else(|| self.stage.default_lr())
    }

    /// Learning rate of a 1-based epoch: the base rate for the first half,
    /// then multiplied by `lr_drop`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.epochs_per_stage / 2 {
            self.base_lr() * self.lr_drop
        } else {
            self.base_lr()
        }
    }

    pub fn ffsr_config(&self) -> FfsrConfig {
        FfsrConfig {
            base_channels: self.ffsr_channels,
            canonical_size: self.canonical_size,
            ..FfsrConfig::default()
        }
    }

    pub fn rife_config(&self, n_classes: usize) -> RifeConfig {
        RifeConfig {
            n_blocks: self.rife_widths.len(),
            widths: self.rife_widths.clone(),
            strides: vec![2; self.rife_widths.len()],
            units_per_block: self.units_per_block,
            stem_channels: self.stem_channels,
            embedding_dim: self.embedding_dim,
            n_classes,
            weight_hidden: self.weight_hidden,
            beta: self.beta,
            dual_stream: self.variant == Variant::Dual,
            canonical_size: self.canonical_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_schedule_drops_at_the_midpoint() {
        let c = TrainConfig::default();
        let lrs: Vec<f64> = (1..=20).map(|e| c.lr_at(e)).collect();
        assert!(lrs[..10].iter().all(|&l| l == 0.01));
        assert!(lrs[10..].iter().all(|&l| (l - 0.001).abs() < 1e-15));
        let joint = TrainConfig {
            stage: Stage::Joint,
            ..TrainConfig::default()
        };
        assert_eq!(joint.lr_at(1), 0.001);
        assert!((joint.lr_at(20) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig {
            stage: Stage::RifeTrain,
            initial_lr: Some(0.05),
            variant: Variant::Single,
            mask: MaskKind::Ones,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("stage = \"joint\"\nepochs_per_stage = 4\n").unwrap();
        assert_eq!(partial.stage, Stage::Joint);
        assert_eq!(partial.epochs_per_stage, 4);
        assert_eq!(partial.batch_size, 16);
        assert!(TrainConfig::from_toml("epochs = 4\n").is_err());
        assert!(TrainConfig::from_toml("alpha = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0\n").is_err());
    }

    #[test]
    fn stage_numbers() {
        for n in 1..=3 {
            assert_eq!(Stage::from_number(n).unwrap().number(), n);
        }
        assert!(Stage::from_number(4).is_err());
    }
}
