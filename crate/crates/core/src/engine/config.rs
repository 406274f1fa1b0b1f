//! Flat `key = value` training configuration.
//!
//! ```text
//! # comment
//! arch = micro_fcn
//! mode = taf
//! taf.rates = 0.005, inf, inf
//! ```

use std::fmt;
use std::str::FromStr;

use super::EngineError;
use crate::data::AugmentOpts;
use crate::model::{Arch, ModelSpec};
use crate::taf::{ChangeRateSchedule, TafConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Key frames only, plain cross-entropy.
    Baseline,
    Taf,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Taf => "taf",
        })
    }
}

impl FromStr for Mode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "taf" => Ok(Mode::Taf),
            _ => Err(EngineError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// How TAF batches are counted against the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Every batch slot holds a pair: `batch_size` labeled examples per step
    /// and the same number of steps per epoch as the baseline.
    Labeled,
    /// Half of each batch is labeled: `batch_size / 2` pairs per step and
    /// twice the steps per epoch, so per-step forward cost matches the
    /// baseline and TAF runs twice the iterations.
    Iterations,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Labeled => "labeled",
            Protocol::Iterations => "iterations",
        })
    }
}

impl FromStr for Protocol {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "labeled" => Ok(Protocol::Labeled),
            "iterations" => Ok(Protocol::Iterations),
            _ => Err(EngineError::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Arch,
    pub width: usize,
    pub classes: usize,
    pub init_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub nesterov: bool,
    pub max_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub protocol: Protocol,
    pub taf: TafConfig,
    pub augment: AugmentOpts,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::MicroFcn,
            width: 8,
            classes: 4,
            init_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            nesterov: true,
            max_epoch: 30,
            batch_size: 8,
            seed: 0,
            mode: Mode::Taf,
            protocol: Protocol::Labeled,
            taf: TafConfig {
                lambda: 1.0,
                n_h: 15,
                delta0: 1.0,
                schedule: ChangeRateSchedule::coarsest_only(0.005, 3).expect("valid default"),
                exclude_zero_offset: true,
            },
            augment: AugmentOpts::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, EngineError> {
    v.parse()
        .map_err(|_| EngineError::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, EngineError> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(EngineError::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl TrainConfig {
    /// Every recognized key.
    pub const KEYS: &'static [&'static str] = &[
        "arch",
        "width",
        "classes",
        "init_lr",
        "momentum",
        "weight_decay",
        "power",
        "nesterov",
        "max_epoch",
        "batch_size",
        "seed",
        "mode",
        "protocol",
        "taf.lambda",
        "taf.n_h",
        "taf.delta0",
        "taf.rates",
        "taf.exclude_zero_offset",
        "aug.flip",
        "aug.scale_min",
        "aug.scale_max",
        "aug.crop",
    ];

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), EngineError> {
        let v = v.trim();
        match key {
            "arch" => self.arch = v.parse()?,
            "width" => self.width = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "init_lr" => self.init_lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "power" => self.power = parse(key, v)?,
            "nesterov" => self.nesterov = parse_bool(key, v)?,
            "max_epoch" => self.max_epoch = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "protocol" => self.protocol = v.parse()?,
            "taf.lambda" => self.taf.lambda = parse(key, v)?,
            "taf.n_h" => self.taf.n_h = parse(key, v)?,
            "taf.delta0" => self.taf.delta0 = parse(key, v)?,
            "taf.rates" => self.taf.schedule = v.parse()?,
            "taf.exclude_zero_offset" => self.taf.exclude_zero_offset = parse_bool(key, v)?,
            "aug.flip" => self.augment.flip = parse_bool(key, v)?,
            "aug.scale_min" => self.augment.scale.0 = parse(key, v)?,
            "aug.scale_max" => self.augment.scale.1 = parse(key, v)?,
            "aug.crop" => {
                self.augment.crop = if v == "none" {
                    None
                } else {
                    let (h, w) = v
                        .split_once('x')
                        .ok_or_else(|| EngineError::Config(format!("aug.crop: expected HxW or none, got {v:?}")))?;
                    Some((parse(key, h)?, parse(key, w)?))
                }
            }
            _ => return Err(EngineError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file on top of `self` and returns the keys it set.
    pub fn apply_str(&mut self, text: &str) -> Result<Vec<String>, EngineError> {
        let mut keys = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EngineError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| {
                let msg = match e {
                    EngineError::Config(m) => m,
                    other => other.to_string(),
                };
                EngineError::Config(format!("line {}: {msg}", i + 1))
            })?;
            keys.push(k.trim().to_string());
        }
        Ok(keys)
    }

    pub fn from_str_with_defaults(text: &str) -> Result<Self, EngineError> {
        let mut cfg = Self::default();
        let keys = cfg.apply_str(text)?;
        if cfg.mode == Mode::Baseline && keys.iter().any(|k| k.starts_with("taf.")) {
            log::warn!("baseline mode: taf.* keys are ignored and lambda is forced to 0");
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Enforces the mode rule and validates. Baseline mode forces λ = 0.
    pub fn finalize(&mut self) -> Result<(), EngineError> {
        if self.mode == Mode::Baseline {
            self.taf.lambda = 0.0;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return bad(format!("init_lr must be > 0, got {}", self.init_lr));
        }
        if self.max_epoch < 1 {
            return bad("max_epoch must be >= 1".into());
        }
        if self.batch_size < 1 || (self.protocol == Protocol::Iterations && self.batch_size < 2) {
            return bad(format!("batch_size {} too small", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.power >= 0.0) {
            return bad("weight_decay and power must be >= 0".into());
        }
        if self.mode == Mode::Baseline && self.taf.lambda != 0.0 {
            return bad("baseline mode requires lambda = 0".into());
        }
        self.taf.validate()?;
        if self.taf.schedule.len() != self.arch.num_branches() {
            return bad(format!(
                "taf.rates has {} entries, {} has {} branches",
                self.taf.schedule.len(),
                self.arch,
                self.arch.num_branches()
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            arch: self.arch,
            num_classes: self.classes,
            width: self.width,
            seed: self.seed,
        }
    }

    /// True when training uses only the supervised term.
    pub fn is_supervised_only(&self) -> bool {
        self.mode == Mode::Baseline || self.taf.is_inert()
    }

    /// Pairs per optimizer step.
    pub fn pairs_per_step(&self) -> usize {
        match (self.mode, self.protocol) {
            (Mode::Taf, Protocol::Iterations) => self.batch_size / 2,
            _ => self.batch_size,
        }
    }

    /// Configuration that trains identically but writes supervised-only runs
    /// in one canonical form, so equivalent runs share a cache key.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        if c.is_supervised_only() {
            let d = Self::default();
            c.batch_size = c.pairs_per_step();
            c.mode = Mode::Baseline;
            c.protocol = Protocol::Labeled;
            c.taf = TafConfig {
                lambda: 0.0,
                n_h: d.taf.n_h,
                schedule: ChangeRateSchedule::new(vec![f64::INFINITY; c.arch.num_branches()])
                    .expect("valid"),
                ..d.taf
            };
        }
        c
    }
}

impl fmt::Display for TrainConfig {
    /// Writes every key, in a form [`TrainConfig::apply_str`] reads back.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.augment;
        writeln!(f, "arch = {}", self.arch)?;
        writeln!(f, "width = {}", self.width)?;
        writeln!(f, "classes = {}", self.classes)?;
        writeln!(f, "init_lr = {}", self.init_lr)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "power = {}", self.power)?;
        writeln!(f, "nesterov = {}", self.nesterov)?;
        writeln!(f, "max_epoch = {}", self.max_epoch)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "protocol = {}", self.protocol)?;
        writeln!(f, "taf.lambda = {}", self.taf.lambda)?;
        writeln!(f, "taf.n_h = {}", self.taf.n_h)?;
        writeln!(f, "taf.delta0 = {}", self.taf.delta0)?;
        writeln!(f, "taf.rates = {}", self.taf.schedule)?;
        writeln!(f, "taf.exclude_zero_offset = {}", self.taf.exclude_zero_offset)?;
        writeln!(f, "aug.flip = {}", a.flip)?;
        writeln!(f, "aug.scale_min = {}", a.scale.0)?;
        writeln!(f, "aug.scale_max = {}", a.scale.1)?;
        match a.crop {
            Some((h, w)) => writeln!(f, "aug.crop = {h}x{w}"),
            None => writeln!(f, "aug.crop = none"),
        }
    }
}
