//! The run configuration: a plain-text `key = value` file, every key
//! overridable by environment variables (`LESIONSEG_<KEY>`) and CLI flags.
//! Unknown keys are rejected; `dump()` echoes a normalized file that
//! reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::AugmentParams;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::ModelConfig;
use crate::procedure::TrainHyper;
use crate::schedule::{RangeTestConfig, Spacing};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model_preset: String,
    pub image_size: usize,
    pub sizes: Vec<usize>,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub loss: String,
    pub smooth: f64,
    pub threshold: f64,
    pub cut: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_iters: usize,
    pub lr_spacing: String,
    pub smooth_beta: f64,
    pub divergence_factor: f64,
    pub stlr_cut_frac: f64,
    pub stlr_ratio: f64,
    pub aug_dihedral: bool,
    pub aug_rotation: bool,
    pub aug_max_rotation_deg: f64,
    pub aug_zoom: bool,
    pub aug_max_zoom: f64,
    pub aug_lighting: bool,
    pub aug_brightness: f64,
    pub aug_contrast: f64,
    pub color_balance: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_preset: "desk".into(),
            image_size: 32,
            sizes: vec![32, 64],
            epochs: 30,
            folds: 3,
            seed: 42,
            batch_size: 8,
            loss: "bce".into(),
            smooth: 1.0,
            threshold: 0.5,
            cut: 0.65,
            lr_start: 1e-5,
            lr_end: 1.0,
            lr_iters: 80,
            lr_spacing: "log".into(),
            smooth_beta: 0.98,
            divergence_factor: 4.0,
            stlr_cut_frac: 0.1,
            stlr_ratio: 32.0,
            aug_dihedral: true,
            aug_rotation: true,
            aug_max_rotation_deg: 44.0,
            aug_zoom: true,
            aug_max_zoom: 1.05,
            aug_lighting: true,
            aug_brightness: 0.05,
            aug_contrast: 0.05,
            color_balance: true,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "aug_brightness",
    "aug_contrast",
    "aug_dihedral",
    "aug_lighting",
    "aug_max_rotation_deg",
    "aug_max_zoom",
    "aug_rotation",
    "aug_zoom",
    "batch_size",
    "color_balance",
    "cut",
    "data_dir",
    "divergence_factor",
    "epochs",
    "folds",
    "image_size",
    "loss",
    "lr_end",
    "lr_iters",
    "lr_spacing",
    "lr_start",
    "model_preset",
    "out_dir",
    "seed",
    "sizes",
    "smooth",
    "smooth_beta",
    "stlr_cut_frac",
    "stlr_ratio",
    "threshold",
];

pub const ENV_PREFIX: &str = "LESIONSEG_";

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("bad value '{other}' for key '{key}' (true|false)"))),
    }
}

fn parse_sizes(key: &str, value: &str) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = value
        .split(',')
        .map(|s| parse_value::<usize>(key, s.trim()))
        .collect::<Result<_>>()?;
    if sizes.is_empty() {
        return Err(Error::Config(format!("key '{key}' needs at least one size")));
    }
    Ok(sizes)
}

impl RunConfig {
    /// Set one key from its textual value. Unknown keys are config errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "model_preset" => {
                ModelConfig::preset(value)?;
                self.model_preset = value.to_string();
            }
            "image_size" => self.image_size = parse_value(key, value)?,
            "sizes" => self.sizes = parse_sizes(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "folds" => self.folds = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "loss" => {
                value.parse::<LossKind>()?;
                self.loss = value.to_string();
            }
            "smooth" => self.smooth = parse_value(key, value)?,
            "threshold" => self.threshold = parse_value(key, value)?,
            "cut" => self.cut = parse_value(key, value)?,
            "lr_start" => self.lr_start = parse_value(key, value)?,
            "lr_end" => self.lr_end = parse_value(key, value)?,
            "lr_iters" => self.lr_iters = parse_value(key, value)?,
            "lr_spacing" => {
                value.parse::<Spacing>()?;
                self.lr_spacing = value.to_string();
            }
            "smooth_beta" => self.smooth_beta = parse_value(key, value)?,
            "divergence_factor" => self.divergence_factor = parse_value(key, value)?,
            "stlr_cut_frac" => self.stlr_cut_frac = parse_value(key, value)?,
            "stlr_ratio" => self.stlr_ratio = parse_value(key, value)?,
            "aug_dihedral" => self.aug_dihedral = parse_bool(key, value)?,
            "aug_rotation" => self.aug_rotation = parse_bool(key, value)?,
            "aug_max_rotation_deg" => self.aug_max_rotation_deg = parse_value(key, value)?,
            "aug_zoom" => self.aug_zoom = parse_bool(key, value)?,
            "aug_max_zoom" => self.aug_max_zoom = parse_value(key, value)?,
            "aug_lighting" => self.aug_lighting = parse_bool(key, value)?,
            "aug_brightness" => self.aug_brightness = parse_value(key, value)?,
            "aug_contrast" => self.aug_contrast = parse_value(key, value)?,
            "color_balance" => self.color_balance = parse_bool(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "model_preset" => self.model_preset.clone(),
            "image_size" => self.image_size.to_string(),
            "sizes" => {
                self.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            }
            "epochs" => self.epochs.to_string(),
            "folds" => self.folds.to_string(),
            "seed" => self.seed.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "loss" => self.loss.clone(),
            "smooth" => self.smooth.to_string(),
            "threshold" => self.threshold.to_string(),
            "cut" => self.cut.to_string(),
            "lr_start" => self.lr_start.to_string(),
            "lr_end" => self.lr_end.to_string(),
            "lr_iters" => self.lr_iters.to_string(),
            "lr_spacing" => self.lr_spacing.clone(),
            "smooth_beta" => self.smooth_beta.to_string(),
            "divergence_factor" => self.divergence_factor.to_string(),
            "stlr_cut_frac" => self.stlr_cut_frac.to_string(),
            "stlr_ratio" => self.stlr_ratio.to_string(),
            "aug_dihedral" => self.aug_dihedral.to_string(),
            "aug_rotation" => self.aug_rotation.to_string(),
            "aug_max_rotation_deg" => self.aug_max_rotation_deg.to_string(),
            "aug_zoom" => self.aug_zoom.to_string(),
            "aug_max_zoom" => self.aug_max_zoom.to_string(),
            "aug_lighting" => self.aug_lighting.to_string(),
            "aug_brightness" => self.aug_brightness.to_string(),
            "aug_contrast" => self.aug_contrast.to_string(),
            "color_balance" => self.color_balance.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("value_of called with unknown key {key}"),
        }
    }

    /// Parse a `key = value` file; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `LESIONSEG_<KEY>` environment overrides.
    pub fn apply_env(&mut self) -> Result<()> {
        for key in CONFIG_KEYS {
            let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
            if let Ok(value) = std::env::var(&var) {
                self.apply_kv(key, &value)?;
            }
        }
        Ok(())
    }

    /// Apply repeated `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!("--set needs key=value, got '{item}'")));
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The normalized config file: all keys, sorted, canonical values.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            writeln!(out, "{key} = {}", self.value_of(key)).expect("string write");
        }
        out
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.model_preset)
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        match self.loss.parse::<LossKind>()? {
            LossKind::SoftJaccard { .. } => Ok(LossKind::SoftJaccard { smooth: self.smooth }),
            other => Ok(other),
        }
    }

    pub fn augment_params(&self) -> Result<AugmentParams> {
        let params = AugmentParams {
            dihedral: self.aug_dihedral,
            rotation: self.aug_rotation,
            max_rotation_deg: self.aug_max_rotation_deg,
            zoom: self.aug_zoom,
            max_zoom: self.aug_max_zoom,
            lighting: self.aug_lighting,
            brightness: self.aug_brightness,
            contrast: self.aug_contrast,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn range_test_config(&self) -> Result<RangeTestConfig> {
        Ok(RangeTestConfig {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            num_iters: self.lr_iters,
            spacing: self.lr_spacing.parse()?,
            smooth_beta: self.smooth_beta,
            divergence_factor: self.divergence_factor,
        })
    }

    pub fn hyper(&self) -> Result<TrainHyper> {
        Ok(TrainHyper {
            epochs_per_phase: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss_kind()?,
            threshold: self.threshold,
            range_test: self.range_test_config()?,
            stlr_cut_frac: self.stlr_cut_frac,
            stlr_ratio: self.stlr_ratio,
            augment: self.augment_params()?,
        })
    }
}
