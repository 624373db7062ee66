//! `key = value` run configuration shared by the command line and the
//! experiment harness.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneSpec, ModelConfig, StageSpec};
use crate::error::{Error, Result};
use crate::posenc::Direction;
use crate::synth::Corruption;
use crate::tensor::Precision;
use crate::train::{LrSchedule, TrainConfig};
use crate::troi::{Insertion, TroiConfig};

/// Keys describing the network; a checkpoint stores exactly these.
pub const MODEL_KEYS: [&str; 11] = [
    "frames",
    "size",
    "channels",
    "classes",
    "troi",
    "troi_at",
    "troi_layers",
    "heads",
    "scene_token",
    "coord_encoding",
    "direction",
];

pub const TRAIN_KEYS: [&str; 10] = [
    "epochs",
    "batch_size",
    "lr",
    "lr_boundaries",
    "lr_factor",
    "momentum",
    "weight_decay",
    "seed",
    "precision",
    "topk",
];

pub const PATH_KEYS: [&str; 5] = ["train_data", "val_data", "checkpoint", "metrics", "corrupt"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frames: usize,
    pub size: usize,
    pub channels: Vec<usize>,
    pub classes: usize,
    pub troi: bool,
    pub troi_at: Insertion,
    pub troi_layers: usize,
    pub heads: usize,
    pub scene_token: bool,
    pub coord_encoding: bool,
    pub direction: Direction,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Explicit drop epochs; thirds of `epochs` when absent.
    pub lr_boundaries: Option<Vec<usize>>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub topk: usize,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub corrupt: Option<Corruption>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            size: 32,
            channels: vec![16, 32, 64, 64],
            classes: 6,
            troi: true,
            troi_at: Insertion::Conv4,
            troi_layers: 1,
            heads: 2,
            scene_token: false,
            coord_encoding: false,
            direction: Direction::LeftToRight,
            epochs: 9,
            batch_size: 16,
            lr: 0.05,
            lr_boundaries: None,
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            precision: Precision::F32,
            topk: 5,
            train_data: None,
            val_data: None,
            checkpoint: None,
            metrics: None,
            corrupt: None,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join(list: &[usize]) -> String {
    list.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "frames" => self.frames = parse_value(key, v)?,
            "size" => self.size = parse_value(key, v)?,
            "channels" => self.channels = parse_list(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "troi" => self.troi = parse_bool(key, v)?,
            "troi_at" => self.troi_at = v.parse()?,
            "troi_layers" => self.troi_layers = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "scene_token" => self.scene_token = parse_bool(key, v)?,
            "coord_encoding" => self.coord_encoding = parse_bool(key, v)?,
            "direction" => self.direction = v.parse()?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "lr_boundaries" => {
                self.lr_boundaries = match v {
                    "" | "thirds" => None,
                    list => Some(parse_list(key, list)?),
                }
            }
            "lr_factor" => self.lr_factor = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "precision" => self.precision = v.parse()?,
            "topk" => self.topk = parse_value(key, v)?,
            "train_data" => self.train_data = optional_path(v),
            "val_data" => self.val_data = optional_path(v),
            "checkpoint" => self.checkpoint = optional_path(v),
            "metrics" => self.metrics = optional_path(v),
            "corrupt" => {
                self.corrupt = match v {
                    "" | "none" => None,
                    mode => Some(mode.parse()?),
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every setting in `text` on top of `self`. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        match key {
            "frames" => self.frames.to_string(),
            "size" => self.size.to_string(),
            "channels" => join(&self.channels),
            "classes" => self.classes.to_string(),
            "troi" => self.troi.to_string(),
            "troi_at" => self.troi_at.to_string(),
            "troi_layers" => self.troi_layers.to_string(),
            "heads" => self.heads.to_string(),
            "scene_token" => self.scene_token.to_string(),
            "coord_encoding" => self.coord_encoding.to_string(),
            "direction" => self.direction.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lr_boundaries" => self.lr_boundaries.as_deref().map_or("thirds".into(), join),
            "lr_factor" => self.lr_factor.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "seed" => self.seed.to_string(),
            "precision" => self.precision.to_string(),
            "topk" => self.topk.to_string(),
            "train_data" => path(&self.train_data),
            "val_data" => path(&self.val_data),
            "checkpoint" => path(&self.checkpoint),
            "metrics" => path(&self.metrics),
            "corrupt" => self.corrupt.map_or("none".into(), |c| c.to_string()),
            _ => unreachable!("key lists cover every field"),
        }
    }

    fn render(&self, keys: &[&str]) -> String {
        let mut out = String::new();
        for key in keys {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// The network-defining subset, in a fixed order.
    pub fn model_text(&self) -> String {
        self.render(&MODEL_KEYS)
    }

    pub fn to_text(&self) -> String {
        let keys: Vec<&str> = MODEL_KEYS
            .iter()
            .chain(&TRAIN_KEYS)
            .chain(&PATH_KEYS)
            .copied()
            .collect();
        self.render(&keys)
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            frames: self.frames,
            width: self.size,
            height: self.size,
            stages: self
                .channels
                .iter()
                .map(|&channels| StageSpec {
                    channels,
                    stride: 2,
                })
                .collect(),
            classes: self.classes,
            ..BackboneSpec::default()
        }
    }

    pub fn troi_config(&self) -> Option<TroiConfig> {
        self.troi.then_some(TroiConfig {
            insertion: self.troi_at,
            layers: self.troi_layers,
            heads: self.heads,
            scene_token: self.scene_token,
            coord_encoding: self.coord_encoding,
            direction: self.direction,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_spec(),
            troi: self.troi_config(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let schedule = match &self.lr_boundaries {
            Some(b) => LrSchedule {
                base: self.lr,
                boundaries: b.clone(),
                factor: self.lr_factor,
            },
            None => LrSchedule {
                factor: self.lr_factor,
                ..LrSchedule::thirds(self.lr, self.epochs)
            },
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule,
            seed: self.seed,
            precision: self.precision,
            topk: self.topk,
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.backbone.validate()?;
        if let Some(troi) = model.troi {
            let at = model.backbone.insertion_stage(troi.insertion);
            troi.validate(model.backbone.stages[at].channels)?;
        }
        self.train_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("troi_at", "conv5").unwrap();
        c.set("lr_boundaries", "20,40").unwrap();
        c.set("corrupt", "iou@0.25").unwrap();
        c.set("train_data", "data/train").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse("dropout = 0.1"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("troi_at = conv7").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# desk run\n\nepochs = 3\nheads=4\n").unwrap();
        assert_eq!((c.epochs, c.heads), (3, 4));
    }

    #[test]
    fn schedule_from_keys() {
        let c = RunConfig::parse("epochs = 80\nlr = 0.01\nlr_boundaries = 20,40").unwrap();
        assert_eq!(c.train_config().schedule, LrSchedule::standard());
        let c = RunConfig::parse("epochs = 30").unwrap();
        assert_eq!(c.train_config().schedule.boundaries, vec![10, 20]);
    }

    #[test]
    fn validation_catches_bad_heads() {
        let c = RunConfig::parse("heads = 5").unwrap();
        assert!(c.validate().is_err());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn model_text_has_only_model_keys() {
        let text = RunConfig::default().model_text();
        assert_eq!(text.lines().count(), MODEL_KEYS.len());
        assert!(!text.contains("epochs"));
    }
}
