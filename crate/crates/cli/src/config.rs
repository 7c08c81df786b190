//! Flat dotted-key run configuration (`train.batch_size=20`), with the
//! `SPECTRAFORMER_SEED` environment variable as a seed fallback.

use anyhow::{bail, Context, Result};
use spectraformer::network::MstConfig;
use spectraformer::train::TrainConfig;
use std::path::Path;

/// Resolved model + training settings for one run.
#[derive(Clone, Debug)]
pub struct RunSettings {
    pub model: MstConfig,
    pub train: TrainConfig,
    /// Whether a seed was set explicitly (file or environment).
    pub seed_explicit: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            model: MstConfig::default(),
            train: TrainConfig::default(),
            seed_explicit: false,
        }
    }
}

impl RunSettings {
    /// Parse a config file of `key=value` lines; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut settings = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}: line {}: expected key=value", path.display(), lineno + 1);
            };
            settings
                .apply(key.trim(), value.trim())
                .with_context(|| format!("{}: line {}", path.display(), lineno + 1))?;
        }
        settings.apply_env_seed()?;
        Ok(settings)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| anyhow::anyhow!("bad value `{value}` for {key}"))
        }
        match key {
            "model.in_channels" => self.model.in_channels = num(key, value)?,
            "model.base_dim" => self.model.base_dim = num(key, value)?,
            "model.stages" => self.model.stages = num(key, value)?,
            "train.patch_size" => self.train.patch_size = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.beta1" => self.train.beta1 = num(key, value)?,
            "train.beta2" => self.train.beta2 = num(key, value)?,
            "train.lr0" => self.train.lr0 = num(key, value)?,
            "train.lr_floor" => self.train.lr_floor = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.seed" => {
                self.train.seed = num(key, value)?;
                self.seed_explicit = true;
            }
            "train.eval_every" => self.train.eval_every = num(key, value)?,
            "train.augment" => {
                self.train.augment = match value {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    _ => bail!("bad value `{value}` for {key} (want true/false)"),
                }
            }
            "train.patches_per_pair" => self.train.patches_per_pair = num(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// When no explicit seed was configured, fall back to SPECTRAFORMER_SEED.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if !self.seed_explicit {
            if let Some(seed) = env_seed()? {
                self.train.seed = seed;
                self.seed_explicit = true;
            }
        }
        Ok(())
    }

    /// Every resolved setting, for reproducibility logging.
    pub fn resolved_lines(&self) -> Vec<String> {
        vec![
            format!("model.in_channels={}", self.model.in_channels),
            format!("model.base_dim={}", self.model.base_dim),
            format!("model.stages={}", self.model.stages),
            format!("train.patch_size={}", self.train.patch_size),
            format!("train.batch_size={}", self.train.batch_size),
            format!("train.beta1={}", self.train.beta1),
            format!("train.beta2={}", self.train.beta2),
            format!("train.lr0={}", self.train.lr0),
            format!("train.lr_floor={}", self.train.lr_floor),
            format!("train.epochs={}", self.train.epochs),
            format!("train.seed={}", self.train.seed),
            format!("train.eval_every={}", self.train.eval_every),
            format!("train.augment={}", self.train.augment),
            format!("train.patches_per_pair={}", self.train.patches_per_pair),
        ]
    }
}

/// Parse SPECTRAFORMER_SEED if present.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("SPECTRAFORMER_SEED") {
        Ok(v) => {
            let seed = v
                .parse::<u64>()
                .map_err(|_| anyhow::anyhow!("SPECTRAFORMER_SEED=`{v}` is not a u64"))?;
            Ok(Some(seed))
        }
        Err(_) => Ok(None),
    }
}

/// Seed precedence: command-line flag, then environment, then default 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    Ok(env_seed()?.unwrap_or(0))
}
