//! Run settings from a flat `key=value` file, overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sgr_core::sgr::SgrConfig;
use sgr_core::synth::SceneSpec;
use sgr_core::train::{TrainConfig, CLIP_NORM};

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub k: usize,
    pub l: usize,
    pub d: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub size: usize,
    pub beta: f64,
    pub rho: f64,
    pub gamma: f64,
    pub focal_gamma: f64,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub no_token_supervision: bool,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub out: PathBuf,
}

impl Default for Settings {
    fn default() -> Self {
        let m = SgrConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            k: m.concepts,
            l: m.max_active,
            d: m.token_dim,
            channels: m.channels,
            layers: m.num_layers,
            heads: m.num_heads,
            classes: m.num_classes,
            size: m.width,
            beta: t.weights.beta,
            rho: t.weights.rho,
            gamma: t.weights.gamma,
            focal_gamma: t.weights.focal_gamma,
            steps: t.steps,
            lr: t.lr,
            momentum: t.momentum,
            clip_norm: CLIP_NORM,
            no_token_supervision: false,
            train_scenes: 200,
            eval_scenes: 50,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("bad value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "" | "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => bail!("bad value {value:?} for {key}: expected true or false"),
    }
}

impl Settings {
    /// Sets one key. Keys are flag names without the leading dashes; `_` and
    /// `-` are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match key.as_str() {
            "seed" => self.seed = parse(&key, value)?,
            "k" => self.k = parse(&key, value)?,
            "l" => self.l = parse(&key, value)?,
            "d" => self.d = parse(&key, value)?,
            "channels" => self.channels = parse(&key, value)?,
            "layers" => self.layers = parse(&key, value)?,
            "heads" => self.heads = parse(&key, value)?,
            "classes" => self.classes = parse(&key, value)?,
            "size" => self.size = parse(&key, value)?,
            "beta" => self.beta = parse(&key, value)?,
            "rho" => self.rho = parse(&key, value)?,
            "gamma" => self.gamma = parse(&key, value)?,
            "focal-gamma" => self.focal_gamma = parse(&key, value)?,
            "steps" => self.steps = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "momentum" => self.momentum = parse(&key, value)?,
            "clip-norm" => self.clip_norm = parse(&key, value)?,
            "no-token-supervision" => self.no_token_supervision = parse_bool(&key, value)?,
            "train-scenes" => self.train_scenes = parse(&key, value)?,
            "eval-scenes" => self.eval_scenes = parse(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => bail!("unknown setting {key:?}"),
        }
        Ok(())
    }

    /// Applies a config file: one `key=value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').unwrap_or((line, ""));
            self.set(key, value).with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn model(&self) -> SgrConfig {
        SgrConfig {
            width: self.size,
            height: self.size,
            channels: self.channels,
            concepts: self.k,
            max_active: self.l,
            token_dim: self.d,
            num_layers: self.layers,
            num_heads: self.heads,
            num_classes: self.classes,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            model: self.model(),
            lr: self.lr,
            momentum: self.momentum,
            steps: self.steps,
            seed: self.seed,
            supervision: !self.no_token_supervision,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..Default::default()
        };
        cfg.weights.beta = self.beta;
        cfg.weights.rho = self.rho;
        cfg.weights.gamma = self.gamma;
        cfg.weights.focal_gamma = self.focal_gamma;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            width: self.size,
            height: self.size,
            num_classes: self.classes,
            ..Default::default()
        }
    }

    /// First scene seeds of the training and held-out splits.
    pub fn split_seeds(&self) -> (u64, u64) {
        let base = self.seed.wrapping_mul(1000);
        (base, base + 500)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            bail!("scene counts must be >= 1");
        }
        if self.train_scenes > 500 || self.eval_scenes > 500 {
            bail!("at most 500 scenes per split (seed ranges would overlap)");
        }
        Ok(())
    }
}
