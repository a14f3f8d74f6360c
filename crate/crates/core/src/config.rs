//! Run configuration: `key=value` lines, `#` starts a comment.
//!
//! Every key has a default; unknown and repeated keys are rejected.
//! [`RunConfig::to_text`] writes every key, so its output parses back to
//! the same configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::{Backbone, BackboneConfig, PretrainConfig};
use crate::degrade::{SensorMtf, DEFAULT_MS_GAIN, DEFAULT_PAN_GAIN};
use crate::error::{bail, ErftError, Result};
use crate::losses::LossWeights;
use crate::metrics::Window;
use crate::patch::AdaptConfig;
use crate::seed::{derive_seed, TAG_BACKBONE, TAG_PRETRAIN};
use crate::tailor::InitMode;
use crate::tensor::AdamConfig;

/// Environment variable consulted when `workers` is not set.
pub const WORKERS_ENV: &str = "ERFT_WORKERS";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub ratio: usize,
    pub patch: usize,
    pub rim: usize,
    pub train_patches: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub ms_gain: f64,
    pub pan_gain: f64,
    pub features: usize,
    pub blocks: usize,
    pub init_mode: InitMode,
    /// `None` = not set (environment, then all cores).
    pub workers: Option<usize>,
    pub window: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_crop: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AdaptConfig::default();
        let w = LossWeights::default();
        let p = PretrainConfig::default();
        RunConfig {
            ratio: 4,
            patch: a.patch,
            rim: a.rim,
            train_patches: a.train_patches,
            batch: a.batch,
            epochs: a.epochs,
            seed: a.seed,
            lr: a.lr,
            weight_decay: a.weight_decay,
            eta1: w.spectral,
            eta2: w.spatial,
            eta3: w.consistency,
            ms_gain: DEFAULT_MS_GAIN,
            pan_gain: DEFAULT_PAN_GAIN,
            features: 32,
            blocks: 4,
            init_mode: a.init_mode,
            workers: None,
            window: Window::default().size,
            pretrain_epochs: p.epochs,
            pretrain_lr: p.adam.lr,
            pretrain_batch: p.batch,
            pretrain_crop: 64,
        }
    }
}

/// Keys in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "ratio",
    "patch",
    "rim",
    "train_patches",
    "batch",
    "epochs",
    "seed",
    "lr",
    "weight_decay",
    "eta1",
    "eta2",
    "eta3",
    "ms_gain",
    "pan_gain",
    "features",
    "blocks",
    "init_mode",
    "workers",
    "window",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_batch",
    "pretrain_crop",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ErftError::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key=value, got {line:?}", no + 1);
            };
            let key = key.trim();
            if seen.contains(&key) {
                bail!(Config, "line {}: duplicate key {key:?}", no + 1);
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                ErftError::Config(m) => ErftError::Config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "ratio" => self.ratio = parse_num(key, value)?,
            "patch" => self.patch = parse_num(key, value)?,
            "rim" => self.rim = parse_num(key, value)?,
            "train_patches" => self.train_patches = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "eta1" => self.eta1 = parse_num(key, value)?,
            "eta2" => self.eta2 = parse_num(key, value)?,
            "eta3" => self.eta3 = parse_num(key, value)?,
            "ms_gain" => self.ms_gain = parse_num(key, value)?,
            "pan_gain" => self.pan_gain = parse_num(key, value)?,
            "features" => self.features = parse_num(key, value)?,
            "blocks" => self.blocks = parse_num(key, value)?,
            "init_mode" => self.init_mode = value.parse()?,
            "workers" => {
                self.workers = match value {
                    "auto" => None,
                    v => {
                        let n: usize = parse_num(key, v)?;
                        if n == 0 {
                            bail!(Config, "workers must be >= 1 or auto");
                        }
                        Some(n)
                    }
                }
            }
            "window" => self.window = parse_num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(key, value)?,
            "pretrain_crop" => self.pretrain_crop = parse_num(key, value)?,
            other => bail!(Config, "unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            bail!(Config, "override {assignment:?} is not key=value");
        };
        self.set(k.trim(), v.trim())?;
        self.validate()
    }

    /// Fills `workers` from `env` (the value of [`WORKERS_ENV`]) if unset.
    pub fn apply_env_workers(&mut self, env: Option<&str>) -> Result<()> {
        if self.workers.is_none() {
            if let Some(v) = env.map(str::trim).filter(|v| !v.is_empty()) {
                self.set("workers", v).map_err(|e| ErftError::Config(format!("{WORKERS_ENV}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 {
            bail!(Config, "ratio must be >= 2");
        }
        if self.patch == 0 || !self.patch.is_multiple_of(self.ratio) || !self.rim.is_multiple_of(self.ratio) {
            bail!(Config, "patch ({}) and rim ({}) must be multiples of ratio {}", self.patch, self.rim, self.ratio);
        }
        if self.train_patches == 0 || self.batch == 0 || self.pretrain_batch == 0 || self.window == 0 {
            bail!(Config, "train_patches, batch, pretrain_batch and window must be >= 1");
        }
        if self.pretrain_crop == 0 || !self.pretrain_crop.is_multiple_of(self.ratio) {
            bail!(Config, "pretrain_crop must be a positive multiple of ratio");
        }
        if self.features == 0 || self.blocks == 0 {
            bail!(Config, "features and blocks must be >= 1");
        }
        for (k, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v.is_finite() && v > 0.0) {
                bail!(Config, "{k} must be > 0");
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be >= 0");
        }
        for (k, g) in [("ms_gain", self.ms_gain), ("pan_gain", self.pan_gain)] {
            if !(g > 0.0 && g < 1.0) {
                bail!(Config, "{k} must lie in (0, 1)");
            }
        }
        self.loss_weights()?;
        Ok(())
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "ratio" => self.ratio.to_string(),
                "patch" => self.patch.to_string(),
                "rim" => self.rim.to_string(),
                "train_patches" => self.train_patches.to_string(),
                "batch" => self.batch.to_string(),
                "epochs" => self.epochs.to_string(),
                "seed" => self.seed.to_string(),
                "lr" => self.lr.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "eta1" => self.eta1.to_string(),
                "eta2" => self.eta2.to_string(),
                "eta3" => self.eta3.to_string(),
                "ms_gain" => self.ms_gain.to_string(),
                "pan_gain" => self.pan_gain.to_string(),
                "features" => self.features.to_string(),
                "blocks" => self.blocks.to_string(),
                "init_mode" => self.init_mode.to_string(),
                "workers" => self.workers.map_or("auto".to_string(), |n| n.to_string()),
                "window" => self.window.to_string(),
                "pretrain_epochs" => self.pretrain_epochs.to_string(),
                "pretrain_lr" => self.pretrain_lr.to_string(),
                "pretrain_batch" => self.pretrain_batch.to_string(),
                "pretrain_crop" => self.pretrain_crop.to_string(),
                _ => unreachable!("key list and match arms agree"),
            };
            writeln!(s, "{key}={value}").expect("string write");
        }
        s
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.eta1, self.eta2, self.eta3)
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig> {
        Ok(AdaptConfig {
            patch: self.patch,
            rim: self.rim,
            train_patches: self.train_patches,
            batch: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            lr: self.lr,
            weight_decay: self.weight_decay,
            weights: self.loss_weights()?,
            init_mode: self.init_mode,
        })
    }

    pub fn backbone_config(&self, bands: usize) -> BackboneConfig {
        BackboneConfig::new(bands, self.features, self.blocks, self.ratio)
    }

    /// A fresh, trainable backbone seeded from `seed`.
    pub fn init_backbone(&self, bands: usize) -> Result<Backbone> {
        Backbone::new(self.backbone_config(bands), derive_seed(self.seed, TAG_BACKBONE))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch: self.pretrain_batch,
            seed: derive_seed(self.seed, TAG_PRETRAIN),
            adam: AdamConfig { lr: self.pretrain_lr, weight_decay: 0.0, ..AdamConfig::default() },
        }
    }

    pub fn sensor_mtf(&self, bands: usize) -> Result<SensorMtf> {
        SensorMtf::new(self.ratio, bands, self.ms_gain, self.pan_gain)
    }

    pub fn metric_window(&self) -> Window {
        Window { size: self.window, stride: self.window }
    }
}
