//! Plain-text run configuration: `key = value` lines, `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub patch: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs (the last epoch always saves).
    pub save_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            lr_min: 5e-7,
            batch: 8,
            epochs: 2000,
            steps_per_epoch: 100,
            patch: 48,
            seed: 20240917,
            save_every: 10,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr && self.lr_min >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr, got lr={} lr_min={}",
                self.lr, self.lr_min
            )));
        }
        let counts = [
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("patch", self.patch),
            ("save_every", self.save_every),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", format!("{:?}", self.lr)),
            ("lr_min", format!("{:?}", self.lr_min)),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("patch", self.patch.to_string()),
            ("seed", self.seed.to_string()),
            ("save_every", self.save_every.to_string()),
            ("augment", self.augment.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "lr" => self.lr = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "save_every" => self.save_every = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Network and schedule small enough for a laptop CPU.
    pub fn toy(scale: usize) -> Self {
        Self {
            model: ModelConfig::toy(scale),
            train: TrainConfig {
                batch: 4,
                epochs: 30,
                steps_per_epoch: 50,
                patch: 24,
                save_every: 5,
                ..TrainConfig::default()
            },
        }
    }

    /// Named presets accepted wherever a config file is.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "toy" => Some(Self::toy(2)),
            _ => None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if self.model.set(key, value)? || self.train.set(key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key {key:?}")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Applies `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a config file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let text = std::fs::read_to_string(Path::new(spec))
            .map_err(|e| Error::Config(format!("{spec}: {e}")))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_pairs().into_iter().chain(self.train.to_pairs()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
