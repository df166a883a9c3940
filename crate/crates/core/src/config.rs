//! Line-oriented run configuration: `key = value`, `#` comments, every
//! key optional with documented defaults, unknown or duplicate keys
//! rejected outright. The canonical rendering (fixed key order, Rust
//! float formatting) feeds the config digest stamped into reports.

use crate::error::{Error, Result};
use crate::fgl::GuidedUpdateConfig;
use crate::losses::LossWeights;
use crate::metrics::fnv1a_hex;
use crate::synthdata::{default_techniques, CorpusConfig, SplitCounts};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Corpus root consumed by train/meta-train/adapt/eval.
    pub corpus_dir: PathBuf,
    /// Output root for checkpoints, reports, and generated corpora.
    pub out_dir: PathBuf,
    /// Fake techniques the detector trains on.
    pub known: Vec<String>,
    /// Held-out techniques used only for adaptation and evaluation.
    pub unknown: Vec<String>,
    pub weights: LossWeights,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the training pool held out for checkpoint selection.
    pub val_fraction: f64,
    pub fgl: GuidedUpdateConfig,
    pub meta_episodes: usize,
    /// Fakes (and reals) per meta-episode query batch.
    pub query_per_class: usize,
    pub image_size: usize,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_dir: "corpus".into(),
            out_dir: "out".into(),
            known: vec!["grid".into(), "bandcut".into(), "seam".into()],
            unknown: vec!["ring".into()],
            weights: LossWeights::default(),
            lr: 2e-4,
            lr_decay: 0.5,
            lr_decay_every: 5,
            batch_size: 32,
            epochs: 20,
            val_fraction: 0.1,
            fgl: GuidedUpdateConfig::default(),
            meta_episodes: 60,
            query_per_class: 8,
            image_size: 32,
            counts: SplitCounts::default(),
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn render_list(items: &[String]) -> String {
    items.join(",")
}

impl RunConfig {
    /// Parses a config body on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus_dir" => self.corpus_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "known" => self.known = parse_list(value),
            "unknown" => self.unknown = parse_list(value),
            "icc_lambda" => self.weights.icc_lambda = parse_num(key, value)?,
            "mu" => self.weights.mu = parse_num(key, value)?,
            "nu" => self.weights.nu = parse_num(key, value)?,
            "tau" => self.weights.tau = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lr_decay" => self.lr_decay = parse_num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "inner_steps" => self.fgl.inner_steps = parse_num(key, value)?,
            "shots" => self.fgl.shots = parse_num(key, value)?,
            "l_base" => self.fgl.l_base = parse_num(key, value)?,
            "w_range" => self.fgl.w_range = parse_num(key, value)?,
            "reg_lambda" => self.fgl.reg_lambda = parse_num(key, value)?,
            "meta_lr" => self.fgl.meta_lr = parse_num(key, value)?,
            "meta_episodes" => self.meta_episodes = parse_num(key, value)?,
            "query_per_class" => self.query_per_class = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "train_count" => self.counts.train = parse_num(key, value)?,
            "support_count" => self.counts.support = parse_num(key, value)?,
            "query_count" => self.counts.query = parse_num(key, value)?,
            "test_count" => self.counts.test = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return err(format!("batch_size must be even and >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return err("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!("val_fraction must be in [0,1), got {}", self.val_fraction));
        }
        if self.lr <= 0.0 || !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return err("lr must be positive and lr_decay in (0,1]".into());
        }
        if self.lr_decay_every == 0 {
            return err("lr_decay_every must be >= 1".into());
        }
        if self.fgl.shots == 0 {
            return err("shots must be >= 1".into());
        }
        if self.fgl.l_base <= 0.0 || !(0.0..1.0).contains(&self.fgl.w_range) || self.fgl.w_range == 0.0 {
            return err("l_base must be positive and w_range in (0,1)".into());
        }
        if self.fgl.meta_lr < 0.0 || self.fgl.reg_lambda < 0.0 {
            return err("meta_lr and reg_lambda must be nonnegative".into());
        }
        if self.query_per_class == 0 {
            return err("query_per_class must be >= 1".into());
        }
        if self.weights.tau <= 0.0 {
            return err(format!("tau must be positive, got {}", self.weights.tau));
        }
        if let Some(id) = self.known.iter().find(|id| self.unknown.contains(id)) {
            return err(format!("technique {id} listed as both known and unknown"));
        }
        Ok(())
    }

    /// Fixed-order rendering; `parse(canonical_text())` reproduces self.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("corpus_dir", self.corpus_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("known", render_list(&self.known));
        kv("unknown", render_list(&self.unknown));
        kv("icc_lambda", self.weights.icc_lambda.to_string());
        kv("mu", self.weights.mu.to_string());
        kv("nu", self.weights.nu.to_string());
        kv("tau", self.weights.tau.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("lr_decay_every", self.lr_decay_every.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("inner_steps", self.fgl.inner_steps.to_string());
        kv("shots", self.fgl.shots.to_string());
        kv("l_base", self.fgl.l_base.to_string());
        kv("w_range", self.fgl.w_range.to_string());
        kv("reg_lambda", self.fgl.reg_lambda.to_string());
        kv("meta_lr", self.fgl.meta_lr.to_string());
        kv("meta_episodes", self.meta_episodes.to_string());
        kv("query_per_class", self.query_per_class.to_string());
        kv("image_size", self.image_size.to_string());
        kv("train_count", self.counts.train.to_string());
        kv("support_count", self.counts.support.to_string());
        kv("query_count", self.counts.query.to_string());
        kv("test_count", self.counts.test.to_string());
        kv("seed", self.seed.to_string());
        out
    }

    /// FNV-1a digest of the canonical rendering.
    pub fn digest(&self) -> String {
        fnv1a_hex(self.canonical_text().as_bytes())
    }

    /// The corpus this config describes, with the default four families.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            out_dir: self.corpus_dir.clone(),
            image_size: self.image_size,
            seed: self.seed,
            techniques: default_techniques(),
            known: self.known.clone(),
            unknown: self.unknown.clone(),
            counts: self.counts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.lr_decay, 0.5);
        assert_eq!(cfg.lr_decay_every, 5);
        assert_eq!(cfg.weights.icc_lambda, 0.5);
        assert_eq!(cfg.fgl.l_base, 2e-4);
    }

    #[test]
    fn comments_whitespace_and_overrides_parse() {
        let text = "\n# experiment 12\n  seed = 9   # nine\nknown = grid , seam\nunknown=bandcut\nlr = 1e-3\nshots = 5\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.known, vec!["grid", "seam"]);
        assert_eq!(cfg.unknown, vec!["bandcut"]);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.fgl.shots, 5);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_fail() {
        let err = RunConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("just some words").is_err());
        assert!(RunConfig::parse("lr = fast").is_err());
    }

    #[test]
    fn validation_rejects_out_of_range_settings() {
        assert!(RunConfig::parse("batch_size = 7").is_err());
        assert!(RunConfig::parse("batch_size = 0").is_err());
        assert!(RunConfig::parse("epochs = 0").is_err());
        assert!(RunConfig::parse("val_fraction = 1.0").is_err());
        assert!(RunConfig::parse("lr = 0").is_err());
        assert!(RunConfig::parse("lr_decay = 0").is_err());
        assert!(RunConfig::parse("shots = 0").is_err());
        assert!(RunConfig::parse("w_range = 1.5").is_err());
        assert!(RunConfig::parse("tau = 0").is_err());
        assert!(RunConfig::parse("known = grid\nunknown = grid").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "seed = 5\nlr = 3e-4\nknown = grid,ring\nunknown = seam\nshots = 5\nmeta_episodes = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        let back = RunConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn digest_tracks_every_field() {
        let base = RunConfig::default();
        let mut changed = base.clone();
        changed.seed = 1;
        assert_ne!(base.digest(), changed.digest());
        let mut changed2 = base.clone();
        changed2.weights.nu = 0.2;
        assert_ne!(base.digest(), changed2.digest());
        assert_eq!(base.digest(), RunConfig::default().digest());
        assert_eq!(base.digest().len(), 16);
    }

    #[test]
    fn corpus_config_mirrors_the_run_settings() {
        let cfg = RunConfig::parse("image_size = 64\ntrain_count = 12\nseed = 3\ncorpus_dir = data/run").unwrap();
        let corpus = cfg.corpus_config();
        assert_eq!(corpus.image_size, 64);
        assert_eq!(corpus.counts.train, 12);
        assert_eq!(corpus.seed, 3);
        assert_eq!(corpus.out_dir, PathBuf::from("data/run"));
        assert!(corpus.validate().is_ok());
    }
}
