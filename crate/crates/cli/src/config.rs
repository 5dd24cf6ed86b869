//! Run configuration as flat `key=value` text.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! has a default, unknown or repeated keys are rejected, and values are range
//! checked before any work starts. Floats are written in Rust's shortest
//! round-trip form so `parse(to_text(c)) == c`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kldd::model::{Ablation, ModelConfig};
use kldd::optim::AdamConfig;

use crate::error::{config_err, data_err, CliError, Result};

/// Every recognised key, in serialisation order.
pub const KEYS: [&str; 31] = [
    "base_channels",
    "channel_mults",
    "time_embed_dim",
    "ld_enabled",
    "kalman_enabled",
    "fusion_enabled",
    "condition_enabled",
    "max_offset",
    "kalman_r",
    "kalman_p0",
    "steps",
    "cldice_weight",
    "lr",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "epochs",
    "max_steps",
    "batch",
    "seed",
    "ensemble",
    "threshold",
    "patch",
    "stride",
    "augment",
    "train_dir",
    "input_dir",
    "gt_dir",
    "out_dir",
    "log_every",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub cldice_weight: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Stop after this many optimiser steps; 0 means no cap.
    pub max_steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub ensemble: usize,
    pub threshold: f64,
    pub patch: usize,
    pub stride: usize,
    pub augment: bool,
    pub train_dir: PathBuf,
    pub input_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Progress lines on stderr every this many steps; 0 silences them.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            cldice_weight: 1.0,
            adam: AdamConfig::default(),
            epochs: 20,
            max_steps: 0,
            batch: 8,
            seed: 0,
            ensemble: 4,
            threshold: 0.5,
            patch: 64,
            stride: 64,
            augment: true,
            train_dir: PathBuf::from("data/train"),
            input_dir: PathBuf::from("data/val"),
            gt_dir: PathBuf::from("data/val"),
            out_dir: PathBuf::from("run"),
            log_every: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .or_else(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => config_err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn parse_path(key: &str, v: &str) -> Result<PathBuf> {
    if v.is_empty() {
        return config_err(format!("{key}: empty path"));
    }
    Ok(PathBuf::from(v))
}

fn path_text(key: &str, p: &Path) -> Result<String> {
    match p.to_str() {
        Some(s) if !s.is_empty() && !s.contains(['\n', '#']) && s.trim() == s => Ok(s.to_string()),
        _ => config_err(format!("{key}: path {p:?} cannot be written as one config line")),
    }
}

fn check(ok: bool, key: &str, v: impl std::fmt::Display, range: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        config_err(format!("{key}={v} is out of range ({range})"))
    }
}

impl RunConfig {
    /// Configuration with every component of the ablation row switched as given.
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.model.set_ablation(a);
        self
    }

    /// Applies one `key=value` assignment without range checks.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "base_channels" => m.base_channels = parse_num(key, v)?,
            "channel_mults" => {
                m.channel_mults = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "time_embed_dim" => m.time_embed_dim = parse_num(key, v)?,
            "ld_enabled" => m.ld_enabled = parse_bool(key, v)?,
            "kalman_enabled" => m.kalman_enabled = parse_bool(key, v)?,
            "fusion_enabled" => m.fusion_enabled = parse_bool(key, v)?,
            "condition_enabled" => m.condition_enabled = parse_bool(key, v)?,
            "max_offset" => m.max_offset = parse_num(key, v)?,
            "kalman_r" => m.kalman.r = parse_num(key, v)?,
            "kalman_p0" => m.kalman.p0 = parse_num(key, v)?,
            "steps" => m.steps = parse_num(key, v)?,
            "cldice_weight" => self.cldice_weight = parse_num(key, v)?,
            "lr" => self.adam.lr = parse_num(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse_num(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam.eps = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "ensemble" => self.ensemble = parse_num(key, v)?,
            "threshold" => self.threshold = parse_num(key, v)?,
            "patch" => self.patch = parse_num(key, v)?,
            "stride" => self.stride = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "train_dir" => self.train_dir = parse_path(key, v)?,
            "input_dir" => self.input_dir = parse_path(key, v)?,
            "gt_dir" => self.gt_dir = parse_path(key, v)?,
            "out_dir" => self.out_dir = parse_path(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            _ => return config_err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        for a in assignments {
            let (k, v) = split_assignment(a.as_ref())?;
            self.set(k, v)?;
        }
        self.validate()
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line).map_err(|e| at_line(n, e))?;
            if seen.iter().any(|s: &String| s == k) {
                return config_err(format!("line {}: key {k:?} given twice", n + 1));
            }
            cfg.set(k, v).map_err(|e| at_line(n, e))?;
            seen.push(k.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_text(&self) -> Result<String> {
        let m = &self.model;
        let mults: Vec<String> = m.channel_mults.iter().map(usize::to_string).collect();
        let values: [String; 31] = [
            m.base_channels.to_string(),
            mults.join(","),
            m.time_embed_dim.to_string(),
            m.ld_enabled.to_string(),
            m.kalman_enabled.to_string(),
            m.fusion_enabled.to_string(),
            m.condition_enabled.to_string(),
            m.max_offset.to_string(),
            m.kalman.r.to_string(),
            m.kalman.p0.to_string(),
            m.steps.to_string(),
            self.cldice_weight.to_string(),
            self.adam.lr.to_string(),
            self.adam.weight_decay.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.epochs.to_string(),
            self.max_steps.to_string(),
            self.batch.to_string(),
            self.seed.to_string(),
            self.ensemble.to_string(),
            self.threshold.to_string(),
            self.patch.to_string(),
            self.stride.to_string(),
            self.augment.to_string(),
            path_text("train_dir", &self.train_dir)?,
            path_text("input_dir", &self.input_dir)?,
            path_text("gt_dir", &self.gt_dir)?,
            path_text("out_dir", &self.out_dir)?,
            self.log_every.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k}={v}").expect("writing to a string");
        }
        Ok(out)
    }

    /// Range checks on every field.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        check((1..=256).contains(&m.base_channels), "base_channels", m.base_channels, "1..=256")?;
        check(
            (1..=5).contains(&m.channel_mults.len()) && m.channel_mults.iter().all(|c| (1..=16).contains(c)),
            "channel_mults",
            format!("{:?}", m.channel_mults),
            "1 to 5 entries in 1..=16",
        )?;
        check(
            m.time_embed_dim >= 2 && m.time_embed_dim <= 1024 && m.time_embed_dim.is_multiple_of(2),
            "time_embed_dim",
            m.time_embed_dim,
            "even, 2..=1024",
        )?;
        check(m.max_offset > 0.0 && m.max_offset <= 16.0, "max_offset", m.max_offset, "(0, 16]")?;
        check(m.kalman.r > 0.0 && m.kalman.r.is_finite(), "kalman_r", m.kalman.r, "> 0")?;
        check(m.kalman.p0 > 0.0 && m.kalman.p0.is_finite(), "kalman_p0", m.kalman.p0, "> 0")?;
        check((1..=10_000).contains(&m.steps), "steps", m.steps, "1..=10000")?;
        check(
            self.cldice_weight >= 0.0 && self.cldice_weight.is_finite(),
            "cldice_weight",
            self.cldice_weight,
            ">= 0",
        )?;
        let a = &self.adam;
        check(a.lr > 0.0 && a.lr <= 1.0, "lr", a.lr, "(0, 1]")?;
        check((0.0..1.0).contains(&a.weight_decay), "weight_decay", a.weight_decay, "[0, 1)")?;
        check((0.0..1.0).contains(&a.beta1), "adam_beta1", a.beta1, "[0, 1)")?;
        check((0.0..1.0).contains(&a.beta2), "adam_beta2", a.beta2, "[0, 1)")?;
        check(a.eps > 0.0 && a.eps < 1.0, "adam_eps", a.eps, "(0, 1)")?;
        check(self.epochs >= 1, "epochs", self.epochs, ">= 1")?;
        check((1..=1024).contains(&self.batch), "batch", self.batch, "1..=1024")?;
        check((1..=64).contains(&self.ensemble), "ensemble", self.ensemble, "1..=64")?;
        check((0.0..=1.0).contains(&self.threshold), "threshold", self.threshold, "[0, 1]")?;
        check(self.patch >= 8, "patch", self.patch, ">= 8")?;
        check((1..=self.patch).contains(&self.stride), "stride", self.stride, "1..=patch")?;
        m.validate().map_err(|e| CliError::Config(e.to_string()))?;
        m.check_extent(self.patch, self.patch)
            .map_err(|_| CliError::Config(format!("patch {} must be divisible by {}", self.patch, 1 << m.depth())))?;
        Ok(())
    }
}

fn at_line(n: usize, e: CliError) -> CliError {
    match e {
        CliError::Config(m) => CliError::Config(format!("line {}: {m}", n + 1)),
        other => other,
    }
}

fn split_assignment(s: &str) -> Result<(&str, &str)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => config_err(format!("expected key=value, got {s:?}")),
    }
}
