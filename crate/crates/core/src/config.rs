//! Flat `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors. Relative data, checkpoint and log
//! paths are resolved against the config file's directory.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::lca::LcaConfig;
use crate::model::{BackboneConfig, BackboneKind, HeadKind, ModelConfig};
use crate::objectives::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Ppm,
    Lcaf,
}

impl FromStr for DataFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ppm" => Ok(DataFormat::Ppm),
            "lcaf" => Ok(DataFormat::Lcaf),
            other => Err(format!("expected `ppm` or `lcaf`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Ppm => "ppm",
            DataFormat::Lcaf => "lcaf",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// `None` means two thirds of `epochs`, rounded.
    pub lr_step_epoch: Option<u32>,
    pub lr_step_factor: f32,
    pub lambda_entropy: f64,
    pub head: HeadKind,
    /// `None` means the backbone's channel count.
    pub embed_dim: Option<usize>,
    pub include_one_by_k: bool,
    pub backbone: BackboneKind,
    pub input_size: (usize, usize),
    pub channels: Vec<usize>,
    pub freeze_backbone: bool,
    pub data_train: PathBuf,
    pub data_test: PathBuf,
    pub data_format: DataFormat,
    pub augment: AugmentConfig,
    pub ckpt_out: PathBuf,
    pub log_csv: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_step_epoch: None,
            lr_step_factor: 0.1,
            lambda_entropy: 0.1,
            head: HeadKind::Lca,
            embed_dim: None,
            include_one_by_k: true,
            backbone: BackboneKind::TinyCnn,
            input_size: (16, 16),
            channels: vec![16, 32],
            freeze_backbone: false,
            data_train: "data/train".into(),
            data_test: "data/test".into(),
            data_format: DataFormat::Ppm,
            augment: AugmentConfig::default(),
            ckpt_out: "checkpoint.lcac".into(),
            log_csv: "metrics.csv".into(),
        }
    }
}

fn parse<V: FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: Display,
{
    raw.parse().map_err(|e: V::Err| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{raw}`: {e}"),
    })
}

fn parse_size(key: &str, raw: &str) -> Result<(usize, usize)> {
    match raw.split_once('x') {
        Some((h, w)) => Ok((parse(key, h.trim())?, parse(key, w.trim())?)),
        None => {
            let s = parse(key, raw)?;
            Ok((s, s))
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                msg: "expected `key=value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "set more than once".into(),
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            key: "--config".into(),
            msg: format!("{}: {e}", path.display()),
        })?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data_train, &mut cfg.data_test, &mut cfg.ckpt_out, &mut cfg.log_csv] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_step_epoch" => self.lr_step_epoch = Some(parse(key, v)?),
            "lr_step_factor" => self.lr_step_factor = parse(key, v)?,
            "lambda_entropy" => self.lambda_entropy = parse(key, v)?,
            "head" => self.head = parse(key, v)?,
            "lca.embed_dim" => self.embed_dim = if v == "auto" { None } else { Some(parse(key, v)?) },
            "lca.include_one_by_k" => self.include_one_by_k = parse(key, v)?,
            "backbone" => self.backbone = parse(key, v)?,
            "input_size" => self.input_size = parse_size(key, v)?,
            "channels" => {
                self.channels = v
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "train.freeze_backbone" => self.freeze_backbone = parse(key, v)?,
            "data.train" => self.data_train = v.into(),
            "data.test" => self.data_test = v.into(),
            "data.format" => self.data_format = parse(key, v)?,
            "aug.translate_px" => self.augment.translate_px = parse(key, v)?,
            "aug.brightness" => self.augment.brightness_delta = parse(key, v)?,
            "aug.noise_sigma" => self.augment.gauss_noise_sigma = parse(key, v)?,
            "aug.hflip" => self.augment.hflip = parse(key, v)?,
            "ckpt.out" => self.ckpt_out = v.into(),
            "log.csv" => self.log_csv = v.into(),
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay", "must be >= 0");
        }
        if !(self.lr_step_factor > 0.0) {
            return fail("lr_step_factor", "must be > 0");
        }
        if self.embed_dim == Some(0) {
            return fail("lca.embed_dim", "must be at least 1");
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return fail("input_size", "must be positive");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return fail("channels", "must be a list of positive integers");
        }
        if self.backbone == BackboneKind::TinyCnn && self.channels.len() != 2 {
            return fail("channels", "tiny_cnn takes exactly two channel counts, e.g. 16,32");
        }
        let lcaf = self.data_format == DataFormat::Lcaf;
        if lcaf != (self.backbone == BackboneKind::ExternalFeatures) {
            return fail("data.format", "lcaf feature files pair with backbone=external_features, ppm images with tiny_cnn");
        }
        LossConfig::new(self.lambda_entropy).map_err(|e| Error::Config {
            key: "lambda_entropy".into(),
            msg: e.to_string(),
        })?;
        self.augment.validate()
    }

    pub fn step_epoch(&self) -> u32 {
        self.lr_step_epoch
            .unwrap_or_else(|| (2.0 * self.epochs as f64 / 3.0).round() as u32)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_entropy: self.lambda_entropy,
        }
    }

    /// Model description for this run. `feature_shape` is the `C×H×W` of the
    /// loaded feature maps and is only read for external features.
    pub fn model_config(&self, feature_shape: [usize; 3], num_classes: usize) -> ModelConfig {
        let backbone = match self.backbone {
            BackboneKind::TinyCnn => BackboneConfig::tiny_cnn(
                self.channels[0],
                self.channels[1],
                self.input_size.0,
                self.input_size.1,
            ),
            BackboneKind::ExternalFeatures => {
                BackboneConfig::external(feature_shape[0], feature_shape[1], feature_shape[2])
            }
        };
        let c = backbone.feature_shape()[0];
        ModelConfig {
            backbone,
            head: self.head,
            lca: LcaConfig {
                in_channels: c,
                embed_dim: self.embed_dim.unwrap_or(c),
                include_one_by_k: self.include_one_by_k,
            },
            num_classes,
        }
    }
}
