//! Plain-text `key = value` run configuration.
//!
//! Every key is checked against [`KEYS`]; unknown keys and malformed values
//! are errors. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::finetune::DistillConfig;
use crate::scoring::{ScoreConfig, ScorerVariant};
use crate::vit::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub data: DataSource,
    pub train_size: usize,
    pub val_size: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    pub baseline_weight_decay: f64,
    pub batch_size: usize,
    pub score_iters: usize,
    pub scorer: ScorerVariant,
    pub rate: f64,
    pub tau: f64,
    pub exempt_layers: Vec<usize>,
    pub epochs: usize,
    pub freeze_epoch: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub random_crop: bool,
}

/// Recognised keys.
pub const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "num_classes",
    "seed",
    "data",
    "train_size",
    "val_size",
    "train_images",
    "train_labels",
    "val_images",
    "val_labels",
    "baseline_epochs",
    "baseline_lr",
    "baseline_weight_decay",
    "batch_size",
    "score_iters",
    "scorer",
    "rate",
    "tau",
    "exempt_layers",
    "epochs",
    "freeze_epoch",
    "alpha",
    "temperature",
    "lr",
    "weight_decay",
    "random_crop",
];

impl Default for RunConfig {
    fn default() -> Self {
        let base = DistillConfig::baseline();
        let ft = DistillConfig::default();
        Self {
            model: ModelConfig::tiny(),
            seed: 0,
            data: DataSource::Synthetic,
            train_size: 10_000,
            val_size: 2_000,
            train_images: None,
            train_labels: None,
            val_images: None,
            val_labels: None,
            baseline_epochs: base.epochs,
            baseline_lr: base.lr,
            baseline_weight_decay: base.weight_decay,
            batch_size: base.batch_size,
            score_iters: ScoreConfig::default().iterations,
            scorer: ScorerVariant::GradWeightedAvg,
            rate: 0.7,
            tau: 0.1,
            exempt_layers: Vec::new(),
            epochs: ft.epochs,
            freeze_epoch: ft.freeze_epoch,
            alpha: ft.alpha,
            temperature: ft.temperature,
            lr: ft.lr,
            weight_decay: ft.weight_decay,
            random_crop: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "image_size" => m.image_size = parse(key, v)?,
            "patch_size" => m.patch_size = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "depth" => m.depth = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    "idx" => DataSource::Idx,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `data` (synthetic | idx)"))),
                }
            }
            "train_size" => self.train_size = parse(key, v)?,
            "val_size" => self.val_size = parse(key, v)?,
            "train_images" => self.train_images = Some(PathBuf::from(v)),
            "train_labels" => self.train_labels = Some(PathBuf::from(v)),
            "val_images" => self.val_images = Some(PathBuf::from(v)),
            "val_labels" => self.val_labels = Some(PathBuf::from(v)),
            "baseline_epochs" => self.baseline_epochs = parse(key, v)?,
            "baseline_lr" => self.baseline_lr = parse(key, v)?,
            "baseline_weight_decay" => self.baseline_weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "score_iters" => self.score_iters = parse(key, v)?,
            "scorer" => self.scorer = v.parse().map_err(|_| Error::Config(format!("unknown scorer `{v}`")))?,
            "rate" => self.rate = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "exempt_layers" => self.exempt_layers = parse_list(v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "freeze_epoch" => self.freeze_epoch = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "random_crop" => self.random_crop = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(&l) = self.exempt_layers.iter().find(|&&l| l >= self.model.depth) {
            return Err(Error::Config(format!("exempt layer {l} out of range for depth {}", self.model.depth)));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("rate must be in (0, 1], got {}", self.rate)));
        }
        if self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.data == DataSource::Idx && self.train_images.is_none() {
            return Err(Error::Config("data = idx needs train_images and train_labels".into()));
        }
        self.baseline_config().validate()?;
        self.distill_config().validate()
    }

    pub fn baseline_config(&self) -> DistillConfig {
        DistillConfig {
            alpha: 0.0,
            epochs: self.baseline_epochs,
            freeze_epoch: self.baseline_epochs,
            lr: self.baseline_lr,
            weight_decay: self.baseline_weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            random_crop: self.random_crop,
            ..DistillConfig::default()
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha,
            temperature: self.temperature,
            epochs: self.epochs,
            freeze_epoch: self.freeze_epoch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            random_crop: self.random_crop,
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig { iterations: self.score_iters, batch_size: self.batch_size, scorer: self.scorer, seed: self.seed }
    }

    /// Serialises every key, suitable for [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        line("image_size", m.image_size.to_string());
        line("patch_size", m.patch_size.to_string());
        line("channels", m.channels.to_string());
        line("embed_dim", m.embed_dim.to_string());
        line("depth", m.depth.to_string());
        line("heads", m.heads.to_string());
        line("mlp_ratio", m.mlp_ratio.to_string());
        line("num_classes", m.num_classes.to_string());
        line("seed", self.seed.to_string());
        line("data", if self.data == DataSource::Idx { "idx" } else { "synthetic" }.into());
        line("train_size", self.train_size.to_string());
        line("val_size", self.val_size.to_string());
        for (k, p) in [
            ("train_images", &self.train_images),
            ("train_labels", &self.train_labels),
            ("val_images", &self.val_images),
            ("val_labels", &self.val_labels),
        ] {
            if let Some(p) = path(p) {
                line(k, p);
            }
        }
        line("baseline_epochs", self.baseline_epochs.to_string());
        line("baseline_lr", self.baseline_lr.to_string());
        line("baseline_weight_decay", self.baseline_weight_decay.to_string());
        line("batch_size", self.batch_size.to_string());
        line("score_iters", self.score_iters.to_string());
        line("scorer", self.scorer.to_string());
        line("rate", self.rate.to_string());
        line("tau", self.tau.to_string());
        line("exempt_layers", self.exempt_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","));
        line("epochs", self.epochs.to_string());
        line("freeze_epoch", self.freeze_epoch.to_string());
        line("alpha", self.alpha.to_string());
        line("temperature", self.temperature.to_string());
        line("lr", self.lr.to_string());
        line("weight_decay", self.weight_decay.to_string());
        line("random_crop", self.random_crop.to_string());
        out
    }
}

/// Comma-separated layer indices; empty means none.
pub fn parse_list(v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse("layer list", p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::parse("# demo\nrate = 0.6\nexempt_layers = 0, 1\nscorer = attn_only_avg\n\ndepth=3\n").unwrap();
        assert_eq!(cfg.rate, 0.6);
        assert_eq!(cfg.exempt_layers, vec![0, 1]);
        assert_eq!(cfg.scorer, ScorerVariant::AttnOnlyAvg);
        assert_eq!(cfg.model.depth, 3);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = RunConfig::parse("rate = 0.7\nrtae = 0.5\n").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("rtae"), "{e}");
        assert!(RunConfig::parse("rate 0.7").is_err());
        assert!(RunConfig::parse("depth = two").is_err());
        assert!(RunConfig::parse("data = csv").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["tau=0.2"]).is_ok());
        assert_eq!(cfg.tau, 0.2);
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
        cfg.exempt_layers = vec![5];
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn every_key_is_settable() {
        let text = RunConfig::default().to_text();
        let written: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        for k in KEYS {
            if !k.ends_with("_images") && !k.ends_with("_labels") {
                assert!(written.contains(k), "{k}");
            }
        }
    }
}
