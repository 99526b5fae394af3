//! Run configuration as line-oriented `key = value` text. Every field has
//! a dotted key; `preset` (desk or full) is applied before all other keys
//! regardless of where it appears. Later keys override earlier ones, so
//! command-line overrides are simply appended.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::decoder2d::Stage;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("precision must be 32 or 64, not `{s}`"))),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

/// Which manifest entries a stage trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSelect {
    Train,
    All,
}

impl FromStr for SplitSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitSelect::Train),
            "all" => Ok(SplitSelect::All),
            _ => Err(Error::config(format!("split must be `train` or `all`, not `{s}`"))),
        }
    }
}

impl Display for SplitSelect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitSelect::Train => "train",
            SplitSelect::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::config(format!("unknown preset `{s}`"))),
        }
    }
}

impl Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Defaults to `lr0 / 100`.
    pub lr_min: Option<f64>,
    /// Stops after this many updates; the schedule spans this budget.
    pub max_steps: Option<usize>,
    /// Draw a fresh random pose per sample and render on the fly instead
    /// of using the fixed dataset views.
    pub continuous_poses: bool,
    /// Keep one checkpoint file per epoch instead of overwriting.
    pub keep_epoch_checkpoints: bool,
    pub split: SplitSelect,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            lr0: 5e-4,
            weight_decay: 5e-2,
            epochs: 100,
            batch: 32,
            warmup_epochs: 0,
            seed: 0,
            precision: Precision::F32,
            lr_min: None,
            max_steps: None,
            continuous_poses: false,
            keep_epoch_checkpoints: false,
            split: SplitSelect::Train,
        }
    }

    pub fn finetune() -> Self {
        Self {
            warmup_epochs: 10,
            ..Self::pretrain()
        }
    }

    pub fn lr_min(&self) -> f64 {
        self.lr_min.unwrap_or(self.lr0 / 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::config("batch and epochs must be at least 1"));
        }
        if self.weight_decay < 0.0 || self.lr_min() < 0.0 {
            return Err(Error::config("weight decay and lr_min must be non-negative"));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr0" => self.lr0 = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "lr_min" => self.lr_min = parse_opt(key, value)?,
            "max_steps" => self.max_steps = parse_opt(key, value)?,
            "continuous_poses" => self.continuous_poses = parse(key, value)?,
            "keep_epoch_checkpoints" => self.keep_epoch_checkpoints = parse(key, value)?,
            "split" => self.split = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn write(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        let mut put = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
        put("lr0", self.lr0.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("warmup_epochs", self.warmup_epochs.to_string());
        put("seed", self.seed.to_string());
        put("precision", self.precision.to_string());
        put("lr_min", fmt_opt(&self.lr_min));
        put("max_steps", fmt_opt(&self.max_steps));
        put("continuous_poses", self.continuous_poses.to_string());
        put("keep_epoch_checkpoints", self.keep_epoch_checkpoints.to_string());
        put("split", self.split.to_string());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub head_hidden: usize,
    /// Use only the first `n` training clouds of each category (by id).
    pub labels_per_class: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::finetune(),
            head_hidden: 256,
            labels_per_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub labels_per_class: Option<usize>,
    /// Seeds the classifier and, without a checkpoint, the random encoder.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr0: 1e-2,
            weight_decay: 1e-4,
            labels_per_class: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            model: match preset {
                Preset::Desk => ModelConfig::desk(),
                Preset::Full => ModelConfig::full(),
            },
            pretrain: TrainConfig::pretrain(),
            finetune: FinetuneConfig::default(),
            probe: ProbeConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    /// Parses `key = value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", no + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Builds from ordered pairs: the last `preset` wins and is applied
    /// first, then every other pair in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = self.pairs();
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.train.validate()?;
        if self.finetune.head_hidden == 0 || self.probe.epochs == 0 || !(self.probe.lr0 > 0.0) {
            return Err(Error::config("finetune head width, probe epochs and probe lr must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::config(format!("unknown config key `{key}`"));
        let (section, field) = key.split_once('.').ok_or_else(unknown)?;
        let m = &mut self.model;
        let known = match section {
            "encoder" => {
                let e = &mut m.encoder;
                match field {
                    "point_dims" => e.point_dims = parse_list(key, value)?,
                    "centers" => e.centers = parse(key, value)?,
                    "k" => e.k = parse(key, value)?,
                    "channels" => e.channels = parse(key, value)?,
                    "start_index" => e.start_index = parse(key, value)?,
                    _ => return Err(unknown()),
                }
                true
            }
            "photo" => {
                let p = &mut m.photo;
                match field {
                    "layers" => p.layers = parse(key, value)?,
                    "channels" => p.channels = parse(key, value)?,
                    "heads" => p.heads = parse(key, value)?,
                    "drop_path" => p.drop_path = parse(key, value)?,
                    "mode" => p.mode = parse(key, value)?,
                    "grid_h" => p.grid_h = parse(key, value)?,
                    "grid_w" => p.grid_w = parse(key, value)?,
                    _ => return Err(unknown()),
                }
                true
            }
            "decoder" => {
                match field {
                    "stages" => m.decoder.stages = parse_stages(key, value)?,
                    "output_bias" => m.decoder.output_bias = parse(key, value)?,
                    _ => return Err(unknown()),
                }
                true
            }
            "loss" => {
                match field {
                    "w_fg" => m.loss.w_fg = parse(key, value)?,
                    "w_bg" => m.loss.w_bg = parse(key, value)?,
                    "per_region" => m.loss.per_region = parse(key, value)?,
                    _ => return Err(unknown()),
                }
                true
            }
            "train" => self.pretrain.set(field, value)?,
            "finetune" => match field {
                "head_hidden" => {
                    self.finetune.head_hidden = parse(key, value)?;
                    true
                }
                "labels_per_class" => {
                    self.finetune.labels_per_class = parse_opt(key, value)?;
                    true
                }
                _ => self.finetune.train.set(field, value)?,
            },
            "probe" => {
                match field {
                    "epochs" => self.probe.epochs = parse(key, value)?,
                    "lr0" => self.probe.lr0 = parse(key, value)?,
                    "weight_decay" => self.probe.weight_decay = parse(key, value)?,
                    "labels_per_class" => self.probe.labels_per_class = parse_opt(key, value)?,
                    "seed" => self.probe.seed = parse(key, value)?,
                    _ => return Err(unknown()),
                }
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(unknown())
        }
    }

    /// Every key with its current value, in canonical order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![("preset".into(), self.preset.to_string())];
        let m = &self.model;
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        let e = &m.encoder;
        put("encoder.point_dims", join(&e.point_dims));
        put("encoder.centers", e.centers.to_string());
        put("encoder.k", e.k.to_string());
        put("encoder.channels", e.channels.to_string());
        put("encoder.start_index", e.start_index.to_string());
        let p = &m.photo;
        put("photo.layers", p.layers.to_string());
        put("photo.channels", p.channels.to_string());
        put("photo.heads", p.heads.to_string());
        put("photo.drop_path", p.drop_path.to_string());
        put("photo.mode", p.mode.to_string());
        put("photo.grid_h", p.grid_h.to_string());
        put("photo.grid_w", p.grid_w.to_string());
        let stages: Vec<String> = m
            .decoder
            .stages
            .iter()
            .map(|s| format!("{}:{}:{}:{}:{}:{}", s.c_in, s.c_out, s.kernel, s.stride, s.pad, s.out_pad))
            .collect();
        put("decoder.stages", stages.join(","));
        put("decoder.output_bias", m.decoder.output_bias.to_string());
        put("loss.w_fg", m.loss.w_fg.to_string());
        put("loss.w_bg", m.loss.w_bg.to_string());
        put("loss.per_region", m.loss.per_region.to_string());
        self.pretrain.write("train", &mut out);
        self.finetune.train.write("finetune", &mut out);
        out.push(("finetune.head_hidden".into(), self.finetune.head_hidden.to_string()));
        out.push(("finetune.labels_per_class".into(), fmt_opt(&self.finetune.labels_per_class)));
        out.push(("probe.epochs".into(), self.probe.epochs.to_string()));
        out.push(("probe.lr0".into(), self.probe.lr0.to_string()));
        out.push(("probe.weight_decay".into(), self.probe.weight_decay.to_string()));
        out.push(("probe.labels_per_class".into(), fmt_opt(&self.probe.labels_per_class)));
        out.push(("probe.seed".into(), self.probe.seed.to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn fmt_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_stages(key: &str, value: &str) -> Result<Vec<Stage>> {
    value
        .split(',')
        .map(|s| {
            let f: Vec<usize> = s.split(':').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
            match f[..] {
                [c_in, c_out, k, st, p, op] => Ok(Stage::new(c_in, c_out, k, st, p, op)),
                _ => Err(Error::config(format!("`{key}`: stage `{s}` needs six `:`-separated fields"))),
            }
        })
        .collect()
}
