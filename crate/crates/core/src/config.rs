//! Run configuration, read from a sectioned `key = value` TOML file.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos do not silently fall back to defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::SgdConfig;
use crate::datagen::{JitterConfig, VirtualRanges};
use crate::error::{Error, Result};
use crate::losses::KdDirection;
use crate::pfs::EntropyThreshold;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub pfs: PfsConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSwitches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Square image side in pixels.
    pub image_size: usize,
    pub base_classes: usize,
    pub incremental_sessions: usize,
    /// N of the N-way K-shot incremental sessions.
    pub ways: usize,
    /// K of the N-way K-shot incremental sessions.
    pub shots: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub jitter: JitterConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            image_size: 32,
            base_classes: 20,
            incremental_sessions: 4,
            ways: 2,
            shots: 5,
            train_per_class: 200,
            test_per_class: 100,
            jitter: JitterConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.incremental_sessions * self.ways
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![256, 128], feature_dim: 64, head_bias: false }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Multiplier applied to every stage's epoch count.
    pub epoch_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            schedule: LrSchedule::Cosine,
            epoch_scale: 1.0,
        }
    }
}

impl OptimConfig {
    /// `max(1, round(epochs · epoch_scale))`
    pub fn scaled_epochs(&self, epochs: usize) -> usize {
        ((epochs as f64 * self.epoch_scale).round() as usize).max(1)
    }

    /// SGD settings for `epoch` of `epochs`, starting from `base_lr`.
    pub fn sgd(&self, base_lr: f64, epoch: usize, epochs: usize) -> SgdConfig {
        let learning_rate = match self.schedule {
            LrSchedule::Constant => base_lr,
            LrSchedule::Cosine => {
                0.5 * base_lr * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
            }
        };
        SgdConfig { learning_rate, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Weight of the center-triplet term.
    pub lambda: f64,
    pub margin: f64,
    /// EMA rate of the class centers.
    pub center_rate: f64,
    /// Virtual classes per real class (0, 1 or 2).
    pub virtual_fold: usize,
    pub virtual_ranges: VirtualRanges,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 100,
            lambda: 0.05,
            margin: 1.0,
            center_rate: 0.1,
            virtual_fold: 1,
            virtual_ranges: VirtualRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    /// Overrides `optim.learning_rate` when set.
    pub learning_rate: Option<f64>,
    /// Run the base fine-tuning stage at all.
    pub enabled: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config { epochs: 50, learning_rate: None, enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub epochs: usize,
    /// Weight of the distillation term.
    pub beta: f64,
    pub temperature: f64,
    pub kd_direction: KdDirection,
    /// Replay the stored real features next to the pseudo-features.
    pub replay_stored: bool,
    /// Overrides `optim.learning_rate` when set.
    pub learning_rate: Option<f64>,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            epochs: 50,
            beta: 0.4,
            temperature: 3.0,
            kd_direction: KdDirection::Forward,
            replay_stored: true,
            learning_rate: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `threshold · ln |C|`
    #[default]
    Fraction,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfsConfig {
    /// Stored real features per class (P).
    pub stored_per_class: usize,
    /// Pseudo-features per old class and session (Q).
    pub synthesized_per_class: usize,
    pub threshold_mode: ThresholdMode,
    pub threshold: f64,
    /// Attempt budget per requested pseudo-feature.
    pub attempts_per_feature: usize,
}

impl Default for PfsConfig {
    fn default() -> Self {
        PfsConfig {
            stored_per_class: 5,
            synthesized_per_class: 10,
            threshold_mode: ThresholdMode::Fraction,
            threshold: 0.5,
            attempts_per_feature: 100,
        }
    }
}

impl PfsConfig {
    pub fn entropy_threshold(&self) -> EntropyThreshold {
        match self.threshold_mode {
            ThresholdMode::Fraction => EntropyThreshold::MaxEntropyFraction(self.threshold),
            ThresholdMode::Absolute => EntropyThreshold::Absolute(self.threshold),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackSelection {
    Softmax,
    Ncm,
    #[default]
    Both,
}

impl FromStr for TrackSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(TrackSelection::Softmax),
            "ncm" => Ok(TrackSelection::Ncm),
            "both" => Ok(TrackSelection::Both),
            other => Err(Error::Config(format!("unknown track {other:?}; expected softmax, ncm or both"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Similarity used by the nearest-class-mean track.
    pub similarity: Similarity,
    pub tracks: TrackSelection,
}

/// Component switches: virtual classes, center-triplet loss, pseudo-feature
/// replay with distillation, and the entropy filter inside synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    pub vcg: bool,
    pub ct: bool,
    pub pfs: bool,
    pub us: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches::all_on()
    }
}

impl AblationSwitches {
    pub fn all_on() -> Self {
        AblationSwitches { vcg: true, ct: true, pfs: true, us: true }
    }

    pub fn all_off() -> Self {
        AblationSwitches { vcg: false, ct: false, pfs: false, us: false }
    }

    /// Turns off every switch named in a comma-separated list of
    /// `vcg`, `ct`, `pfs`, `us`.
    pub fn disable(&mut self, list: &str) -> Result<()> {
        for token in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "vcg" => self.vcg = false,
                "ct" => self.ct = false,
                "pfs" => self.pfs = false,
                "us" => self.us = false,
                other => {
                    return Err(Error::Config(format!("unknown ablation token {other:?}; expected vcg, ct, pfs or us")))
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for AblationSwitches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = |b: bool| if b { "on" } else { "off" };
        write!(f, "vcg={} ct={} pfs={} us={}", on(self.vcg), on(self.ct), on(self.pfs), on(self.us))
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let fail = |msg: String| Err(Error::Config(msg));
        if d.base_classes < 2 {
            return fail(format!("base_classes must be at least 2, got {}", d.base_classes));
        }
        if d.incremental_sessions > 0 && (d.ways == 0 || d.shots == 0) {
            return fail("ways and shots must be positive when incremental sessions exist".into());
        }
        if d.train_per_class < 2 || d.test_per_class == 0 {
            return fail("train_per_class must be at least 2 and test_per_class at least 1".into());
        }
        if d.shots > d.train_per_class {
            return fail(format!("shots {} exceed train_per_class {}", d.shots, d.train_per_class));
        }
        if d.image_size < 4 {
            return fail(format!("image_size must be at least 4, got {}", d.image_size));
        }
        let m = &self.model;
        if m.feature_dim == 0 || m.hidden.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return fail("optimizer needs learning_rate > 0, momentum in [0, 1), weight_decay >= 0".into());
        }
        if o.batch_size == 0 || !(o.epoch_scale > 0.0) {
            return fail("batch_size and epoch_scale must be positive".into());
        }
        let s1 = &self.stage1;
        if !(s1.lambda >= 0.0) || !(s1.margin >= 0.0) {
            return fail(format!("lambda and margin must be nonnegative, got {} and {}", s1.lambda, s1.margin));
        }
        if !(s1.center_rate > 0.0 && s1.center_rate <= 1.0) {
            return fail(format!("center_rate must lie in (0, 1], got {}", s1.center_rate));
        }
        if s1.virtual_fold > 2 {
            return fail(format!("virtual_fold must be 0, 1 or 2, got {}", s1.virtual_fold));
        }
        let r = &s1.virtual_ranges;
        let in_order = |a: [f64; 2]| a[0] > 0.0 && a[0] <= a[1];
        if !(r.hue_min > 0.0 && r.hue_min <= r.hue_max && r.hue_max < 360.0) || !in_order(r.shrink) || !in_order(r.grow) {
            return fail("virtual ranges must be ordered, positive, with hue below 360".into());
        }
        if s1.epochs == 0 || self.stage2.epochs == 0 || self.stage3.epochs == 0 {
            return fail("every stage needs at least one epoch".into());
        }
        for lr in [self.stage2.learning_rate, self.stage3.learning_rate].into_iter().flatten() {
            if !(lr > 0.0) {
                return fail(format!("stage learning rates must be positive, got {lr}"));
            }
        }
        let s3 = &self.stage3;
        if !(s3.beta >= 0.0) || !(s3.temperature > 0.0) {
            return fail(format!("beta must be nonnegative and temperature positive, got {} and {}", s3.beta, s3.temperature));
        }
        let p = &self.pfs;
        if p.stored_per_class == 0 {
            return fail("stored_per_class (P) must be at least 1".into());
        }
        if p.attempts_per_feature == 0 {
            return fail("attempts_per_feature must be at least 1".into());
        }
        if !(p.threshold > 0.0) {
            return fail(format!("entropy threshold must be positive, got {}", p.threshold));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = Config::default();
        assert_eq!(c.stage1.lambda, 0.05);
        assert_eq!(c.stage1.margin, 1.0);
        assert_eq!(c.pfs.stored_per_class, 5);
        assert_eq!(c.pfs.synthesized_per_class, 10);
        assert_eq!(c.stage3.temperature, 3.0);
        assert_eq!(c.stage3.beta, 0.4);
        assert_eq!((c.stage1.epochs, c.stage2.epochs, c.stage3.epochs), (100, 50, 50));
        assert_eq!((c.optim.learning_rate, c.optim.momentum, c.optim.weight_decay), (0.1, 0.9, 5e-4));
        assert_eq!(c.data.total_classes(), 28);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_and_round_trip() {
        let c = Config::from_toml_str("[stage1]\nlambda = 0.1\n[ablation]\nus = false\n").unwrap();
        assert_eq!(c.stage1.lambda, 0.1);
        assert_eq!(c.stage1.margin, 1.0);
        assert!(!c.ablation.us && c.ablation.pfs);
        let text = c.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        assert!(Config::from_toml_str("[stage1]\nlambda = -1.0\n").is_err());
        assert!(Config::from_toml_str("[stage1]\nmargin = -0.5\n").is_err());
        assert!(Config::from_toml_str("[stage1]\nlamda = 0.1\n").is_err());
        assert!(Config::from_toml_str("[data]\nshots = 500\n").is_err());
        assert!(Config::from_toml_str("[stage1]\nvirtual_fold = 3\n").is_err());
    }

    #[test]
    fn ablation_tokens() {
        let mut s = AblationSwitches::all_on();
        s.disable("vcg, ct").unwrap();
        assert_eq!(s, AblationSwitches { vcg: false, ct: false, pfs: true, us: true });
        assert!(s.disable("vcg,xyz").is_err());
        assert_eq!(s.to_string(), "vcg=off ct=off pfs=on us=on");
    }

    #[test]
    fn schedule_and_scaling() {
        let o = OptimConfig { epoch_scale: 0.3, ..OptimConfig::default() };
        assert_eq!(o.scaled_epochs(100), 30);
        assert_eq!(o.scaled_epochs(1), 1);
        assert_eq!(o.sgd(0.1, 0, 10).learning_rate, 0.1);
        assert!((o.sgd(0.1, 5, 10).learning_rate - 0.05).abs() < 1e-15);
        let c = OptimConfig { schedule: LrSchedule::Constant, ..o };
        assert_eq!(c.sgd(0.1, 9, 10).learning_rate, 0.1);
    }
}
