//! Run configuration: defaults, presets, flat `key = value` config files,
//! and flag overrides, resolved in that order. The resolved configuration is
//! echoed verbatim to the log, written next to run outputs, and embedded in
//! checkpoints — no hidden defaults influence results.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, VoltError};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Volt,
    Evolt,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Volt => "volt",
            Variant::Evolt => "evolt",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "volt" => Ok(Variant::Volt),
            "evolt" => Ok(Variant::Evolt),
            other => Err(VoltError::config(format!(
                "unknown variant `{other}` (expected volt or evolt)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainSplit {
    Train,
    All,
}

impl TrainSplit {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainSplit::Train => "train",
            TrainSplit::All => "all",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "train" => Ok(TrainSplit::Train),
            "all" => Ok(TrainSplit::All),
            other => Err(VoltError::config(format!(
                "unknown training split `{other}` (expected train or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    // Model geometry.
    pub d: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ffn_hidden: usize,
    pub l_enc: usize,
    pub l_dec: usize,
    pub g: usize,
    pub s: usize,
    pub m_max: usize,
    // Optimization.
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub train_split: TrainSplit,
    // Dataset generation.
    pub objects: usize,
    pub views: usize,
    pub p: usize,
    pub embed_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Evolt,
            seed: 0,
            d: 64,
            heads: 4,
            d_k: 16,
            ffn_hidden: 256,
            l_enc: 6,
            l_dec: 6,
            g: 16,
            s: 4,
            m_max: 24,
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            steps: 2000,
            train_split: TrainSplit::Train,
            objects: 64,
            views: 24,
            p: 16,
            embed_seed: crate::data::DEFAULT_EMBED_SEED,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            d_k: self.d_k,
            ffn_hidden: self.ffn_hidden,
            l_enc: self.l_enc,
            l_dec: self.l_dec,
            g: self.g,
            s: self.s,
            m_max: self.m_max,
            enhance: self.variant == Variant::Evolt,
        }
    }

    pub fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if !(1..=24).contains(&self.views) {
            return Err(VoltError::config("views must be in [1, 24]"));
        }
        if self.objects < 2 {
            return Err(VoltError::config("objects must be at least 2"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(VoltError::config("batch_size and steps must be positive"));
        }
        if self.lr <= 0.0 || self.eps <= 0.0 {
            return Err(VoltError::config("lr and eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(VoltError::config("beta1 and beta2 must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(VoltError::config("weight_decay must be nonnegative"));
        }
        if self.p == 0 {
            return Err(VoltError::config("p must be positive"));
        }
        Ok(())
    }

    /// Apply one `key = value` assignment (shared by config files and flags).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| VoltError::config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "variant" => self.variant = Variant::parse(value)?,
            "seed" => self.seed = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_k" => self.d_k = num(key, value)?,
            "ffn_hidden" => self.ffn_hidden = num(key, value)?,
            "l_enc" => self.l_enc = num(key, value)?,
            "l_dec" => self.l_dec = num(key, value)?,
            "g" => self.g = num(key, value)?,
            "s" => self.s = num(key, value)?,
            "m_max" => self.m_max = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "train_split" => self.train_split = TrainSplit::parse(value)?,
            "objects" => self.objects = num(key, value)?,
            "views" => self.views = num(key, value)?,
            "p" => self.p = num(key, value)?,
            "embed_seed" => self.embed_seed = num(key, value)?,
            other => {
                return Err(VoltError::config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Named presets. `overfit8` is the small memorization run; `trend64`
    /// is the divergence/view-count study configuration (24 views, 2000
    /// steps, compact model so the paired variant runs finish on a desk).
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "overfit8" => {
                self.objects = 8;
                self.views = 8;
                self.g = 16;
                self.s = 4;
                self.steps = 500;
                self.lr = 1e-3;
                self.batch_size = 8;
                self.train_split = TrainSplit::All;
            }
            "trend64" => {
                self.objects = 64;
                self.views = 24;
                self.g = 16;
                self.s = 4;
                self.steps = 2000;
                self.lr = 1e-3;
                self.batch_size = 8;
                self.train_split = TrainSplit::All;
                self.d = 32;
                self.heads = 4;
                self.d_k = 8;
                self.ffn_hidden = 128;
                self.l_enc = 6;
                self.l_dec = 2;
            }
            other => {
                return Err(VoltError::config(format!("unknown preset `{other}`")));
            }
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VoltError::config(format!("config line {} is not `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The full resolved configuration, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("variant", self.variant.as_str().to_string());
        kv("seed", self.seed.to_string());
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("d_k", self.d_k.to_string());
        kv("ffn_hidden", self.ffn_hidden.to_string());
        kv("l_enc", self.l_enc.to_string());
        kv("l_dec", self.l_dec.to_string());
        kv("g", self.g.to_string());
        kv("s", self.s.to_string());
        kv("m_max", self.m_max.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("weight_decay", format!("{:e}", self.weight_decay));
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", format!("{:e}", self.eps));
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("train_split", self.train_split.as_str().to_string());
        kv("objects", self.objects.to_string());
        kv("views", self.views.to_string());
        kv("p", self.p.to_string());
        kv("embed_seed", self.embed_seed.to_string());
        out
    }

    /// Inverse of `echo`, used when reading checkpoints.
    pub fn from_echo(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_honor_reference_constants() {
        let cfg = RunConfig::default();
        let echo = cfg.echo();
        assert!(echo.contains("l_enc = 6"));
        assert!(echo.contains("beta1 = 0.9"));
        assert!(echo.contains("beta2 = 0.999"));
        assert!(echo.contains("views = 24"));
        cfg.validate().unwrap();
    }

    #[test]
    fn g32_output_is_selectable() {
        let mut cfg = RunConfig::default();
        cfg.set("g", "32").unwrap();
        cfg.validate().unwrap();
        assert!(cfg.echo().contains("g = 32"));
        assert_eq!(cfg.model_config().n_tokens(), 512);
    }

    #[test]
    fn echo_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.apply_preset("trend64").unwrap();
        cfg.set("seed", "9").unwrap();
        cfg.set("variant", "volt").unwrap();
        let back = RunConfig::from_echo(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_values_are_overridable_by_later_assignments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("steps = 7\nlr = 0.5 # comment\n\n# full-line comment\n")
            .unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.lr, 0.5);
        // Flag overrides arrive as later set() calls.
        cfg.set("steps", "11").unwrap();
        assert_eq!(cfg.steps, 11);

        assert!(cfg.apply_text("bogus = 3").is_err());
        assert!(cfg.apply_text("steps 3").is_err());
    }

    #[test]
    fn invalid_geometry_is_rejected_before_compute() {
        let mut cfg = RunConfig::default();
        cfg.set("g", "15").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("views", "25").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets_pin_their_published_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_preset("overfit8").unwrap();
        assert_eq!(
            (cfg.objects, cfg.views, cfg.g, cfg.s, cfg.steps, cfg.batch_size),
            (8, 8, 16, 4, 500, 8)
        );
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.train_split, TrainSplit::All);

        let mut cfg = RunConfig::default();
        cfg.apply_preset("trend64").unwrap();
        assert_eq!((cfg.objects, cfg.views, cfg.steps), (64, 24, 2000));
        assert!(cfg.apply_preset("nope").is_err());
    }
}
