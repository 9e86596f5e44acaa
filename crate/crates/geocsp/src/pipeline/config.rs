//! Experiment configuration: a flat `key = value` text format with `#`
//! comments, strict unknown-key rejection, per-key overrides, and a
//! content hash over the canonical serialization.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoder::{Activation, PositionalEncoding};
use crate::error::{Error, Result};
use crate::objectives::{ContrastiveConfig, LossKind, SamplingComponents};
use crate::supervised::SupervisedConfig;

/// Which positional encoding family the encoder uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Wrap,
    Grid,
}

impl EncoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Wrap => "wrap",
            EncoderKind::Grid => "grid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wrap" => Ok(EncoderKind::Wrap),
            "grid" => Ok(EncoderKind::Grid),
            other => Err(Error::Config(format!("unknown encoder kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub scales: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn positional(&self) -> PositionalEncoding {
        match self.kind {
            EncoderKind::Wrap => PositionalEncoding::Wrap,
            EncoderKind::Grid => PositionalEncoding::Grid {
                scales: self.scales,
                r_min: self.r_min,
                r_max: self.r_max,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    /// `None` skips pre-training (the supervised-only baseline).
    pub objective: Option<LossKind>,
    pub components: SamplingComponents,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub neg_locations: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl PretrainConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            loss: self.objective.unwrap_or(LossKind::Mc),
            components: self.components,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            beta1: self.beta1,
            beta2: self.beta2,
            tau0: self.tau0,
            tau1: self.tau1,
            tau2: self.tau2,
            negatives_per_image: self.neg_locations,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Positive-term weight of the presence-absence loss.
    pub beta: f64,
    pub head_learning_rate: f64,
    pub head_epochs: usize,
}

impl FinetuneConfig {
    pub fn supervised(&self) -> SupervisedConfig {
        SupervisedConfig {
            positive_weight: self.beta,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    /// Pre-generated dataset files; when absent, data is synthesized from
    /// the `synth` section.
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub centers_per_class: usize,
    pub kappa: f64,
    pub feature_noise: f64,
    pub train_examples: usize,
    pub eval_examples: usize,
}

/// Everything a run needs, resolved. Field defaults follow the tuned
/// values this codebase ships with; any key can be overridden from a config
/// file or `--set key=value`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Location embedding dimension d.
    pub embed_dim: usize,
    /// Frozen image feature dimension.
    pub feature_dim: usize,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Labeled percentage for a single fine-tune run.
    pub lambda: f64,
    /// Labeled percentages swept by run-experiment.
    pub lambda_list: Vec<f64>,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            embed_dim: 512,
            feature_dim: 32,
            encoder: EncoderConfig {
                kind: EncoderKind::Grid,
                scales: 64,
                r_min: 0.01,
                r_max: 1.0,
                hidden_layers: 1,
                hidden_units: 512,
                dropout: 0.5,
                activation: Activation::LeakyRelu,
            },
            pretrain: PretrainConfig {
                objective: Some(LossKind::Mc),
                components: SamplingComponents::ALL,
                alpha1: 1.0,
                alpha2: 1.0,
                beta1: 1.0,
                beta2: 1.0,
                tau0: 1.0,
                tau1: 1.0,
                tau2: 1.0,
                neg_locations: 1,
                learning_rate: 0.0002,
                epochs: 100,
                batch_size: 64,
            },
            finetune: FinetuneConfig {
                learning_rate: 0.0005,
                epochs: 30,
                batch_size: 64,
                beta: 1.0,
                head_learning_rate: 0.001,
                head_epochs: 200,
            },
            lambda: 5.0,
            lambda_list: vec![5.0, 10.0, 20.0, 100.0],
            data: DataConfig::default(),
            synth: SynthConfig {
                classes: 20,
                centers_per_class: 1,
                kappa: 20.0,
                feature_noise: 2.5,
                train_examples: 5000,
                eval_examples: 2000,
            },
        }
    }
}

impl TrainConfig {
    /// Parse a config file on top of the defaults, then apply overrides and
    /// validate.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                msg: format!("expected 'key = value', got '{raw}'"),
            })?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        for (key, value) in overrides {
            cfg.set_key(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults plus overrides, validated.
    pub fn from_overrides(seed: Option<u64>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in overrides {
            cfg.set_key(key, value)?;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field by its flat key.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad_value = |what: &str| Error::Config(format!("bad value '{value}' for {what} '{key}'"));
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad_value("numeric key"))?
            };
        }
        match key {
            "seed" => self.seed = num!(u64),
            "d" => self.embed_dim = num!(usize),
            "d_img" => self.feature_dim = num!(usize),
            "encoder.kind" => self.encoder.kind = EncoderKind::parse(value)?,
            "encoder.scales" => self.encoder.scales = num!(usize),
            "encoder.r_min" => self.encoder.r_min = num!(f64),
            "encoder.r_max" => self.encoder.r_max = num!(f64),
            "encoder.hidden_layers" => self.encoder.hidden_layers = num!(usize),
            "encoder.hidden_units" => self.encoder.hidden_units = num!(usize),
            "encoder.dropout" => self.encoder.dropout = num!(f64),
            "encoder.activation" => self.encoder.activation = Activation::parse(value)?,
            "pretrain.objective" => {
                self.pretrain.objective = match value {
                    "none" => None,
                    other => Some(LossKind::parse(other)?),
                }
            }
            "pretrain.components" => {
                self.pretrain.components = SamplingComponents::parse(value)?
            }
            "pretrain.alpha1" => self.pretrain.alpha1 = num!(f64),
            "pretrain.alpha2" => self.pretrain.alpha2 = num!(f64),
            "pretrain.beta1" => self.pretrain.beta1 = num!(f64),
            "pretrain.beta2" => self.pretrain.beta2 = num!(f64),
            "pretrain.tau0" => self.pretrain.tau0 = num!(f64),
            "pretrain.tau1" => self.pretrain.tau1 = num!(f64),
            "pretrain.tau2" => self.pretrain.tau2 = num!(f64),
            "pretrain.neg_locations" => self.pretrain.neg_locations = num!(usize),
            "pretrain.lr" => self.pretrain.learning_rate = num!(f64),
            "pretrain.epochs" => self.pretrain.epochs = num!(usize),
            "pretrain.batch_size" => self.pretrain.batch_size = num!(usize),
            "finetune.lr" => self.finetune.learning_rate = num!(f64),
            "finetune.epochs" => self.finetune.epochs = num!(usize),
            "finetune.batch_size" => self.finetune.batch_size = num!(usize),
            "finetune.beta" => self.finetune.beta = num!(f64),
            "finetune.head_lr" => self.finetune.head_learning_rate = num!(f64),
            "finetune.head_epochs" => self.finetune.head_epochs = num!(usize),
            "lambda" => self.lambda = num!(f64),
            "lambda_list" => {
                let mut list = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    list.push(part.parse::<f64>().map_err(|_| bad_value("lambda list"))?);
                }
                if list.is_empty() {
                    return Err(bad_value("lambda list"));
                }
                self.lambda_list = list;
            }
            "data.train" => {
                self.data.train = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "data.eval" => {
                self.data.eval = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "synth.classes" => self.synth.classes = num!(usize),
            "synth.centers_per_class" => self.synth.centers_per_class = num!(usize),
            "synth.kappa" => self.synth.kappa = num!(f64),
            "synth.feature_noise" => self.synth.feature_noise = num!(f64),
            "synth.train_examples" => self.synth.train_examples = num!(usize),
            "synth.eval_examples" => self.synth.eval_examples = num!(usize),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 1 || self.feature_dim < 1 {
            return Err(Error::Config("d and d_img must be at least 1".into()));
        }
        self.encoder.positional().validate()?;
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return Err(Error::Config(format!(
                "encoder.dropout {} outside [0, 1)",
                self.encoder.dropout
            )));
        }
        if self.encoder.hidden_layers < 1 || self.encoder.hidden_units < 1 {
            return Err(Error::Config(
                "encoder needs at least one hidden layer and unit".into(),
            ));
        }
        if self.pretrain.objective.is_some() {
            self.pretrain.contrastive().validate()?;
            if !(self.pretrain.learning_rate > 0.0) {
                return Err(Error::Config("pretrain.lr must be positive".into()));
            }
            if self.pretrain.epochs < 1 {
                return Err(Error::Config("pretrain.epochs must be at least 1".into()));
            }
            if self.pretrain.batch_size < 2 {
                return Err(Error::Config(
                    "pretrain.batch_size must be at least 2 for in-batch negatives".into(),
                ));
            }
        }
        self.finetune.supervised().validate()?;
        if !(self.finetune.head_learning_rate > 0.0) || self.finetune.head_epochs < 1 {
            return Err(Error::Config(
                "head training needs a positive lr and at least one epoch".into(),
            ));
        }
        for lambda in std::iter::once(self.lambda).chain(self.lambda_list.iter().copied()) {
            if !(lambda > 0.0 && lambda <= 100.0) {
                return Err(Error::Config(format!("lambda {lambda} outside (0, 100]")));
            }
        }
        if self.synth.classes < 1 || self.synth.centers_per_class < 1 {
            return Err(Error::Config(
                "synthetic data needs at least one class and center".into(),
            ));
        }
        if !(self.synth.kappa > 0.0) {
            return Err(Error::Config("synth.kappa must be positive".into()));
        }
        if self.synth.feature_noise < 0.0 {
            return Err(Error::Config("synth.feature_noise must be >= 0".into()));
        }
        if self.synth.train_examples < 1 || self.synth.eval_examples < 1 {
            return Err(Error::Config(
                "synthetic splits need at least one example".into(),
            ));
        }
        Ok(())
    }

    /// Canonical serialization: every key, sorted, one `key = value` line.
    pub fn canonical_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("d".into(), self.embed_dim.to_string()),
            ("d_img".into(), self.feature_dim.to_string()),
            ("encoder.kind".into(), self.encoder.kind.name().into()),
            ("encoder.scales".into(), self.encoder.scales.to_string()),
            ("encoder.r_min".into(), self.encoder.r_min.to_string()),
            ("encoder.r_max".into(), self.encoder.r_max.to_string()),
            (
                "encoder.hidden_layers".into(),
                self.encoder.hidden_layers.to_string(),
            ),
            (
                "encoder.hidden_units".into(),
                self.encoder.hidden_units.to_string(),
            ),
            ("encoder.dropout".into(), self.encoder.dropout.to_string()),
            (
                "encoder.activation".into(),
                self.encoder.activation.name().into(),
            ),
            (
                "pretrain.objective".into(),
                self.pretrain
                    .objective
                    .map(|o| o.name().to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
            (
                "pretrain.components".into(),
                self.pretrain.components.name(),
            ),
            ("pretrain.alpha1".into(), self.pretrain.alpha1.to_string()),
            ("pretrain.alpha2".into(), self.pretrain.alpha2.to_string()),
            ("pretrain.beta1".into(), self.pretrain.beta1.to_string()),
            ("pretrain.beta2".into(), self.pretrain.beta2.to_string()),
            ("pretrain.tau0".into(), self.pretrain.tau0.to_string()),
            ("pretrain.tau1".into(), self.pretrain.tau1.to_string()),
            ("pretrain.tau2".into(), self.pretrain.tau2.to_string()),
            (
                "pretrain.neg_locations".into(),
                self.pretrain.neg_locations.to_string(),
            ),
            ("pretrain.lr".into(), self.pretrain.learning_rate.to_string()),
            ("pretrain.epochs".into(), self.pretrain.epochs.to_string()),
            (
                "pretrain.batch_size".into(),
                self.pretrain.batch_size.to_string(),
            ),
            ("finetune.lr".into(), self.finetune.learning_rate.to_string()),
            ("finetune.epochs".into(), self.finetune.epochs.to_string()),
            (
                "finetune.batch_size".into(),
                self.finetune.batch_size.to_string(),
            ),
            ("finetune.beta".into(), self.finetune.beta.to_string()),
            (
                "finetune.head_lr".into(),
                self.finetune.head_learning_rate.to_string(),
            ),
            (
                "finetune.head_epochs".into(),
                self.finetune.head_epochs.to_string(),
            ),
            ("lambda".into(), self.lambda.to_string()),
            (
                "lambda_list".into(),
                self.lambda_list
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "data.train".into(),
                self.data
                    .train
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            (
                "data.eval".into(),
                self.data
                    .eval
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("synth.classes".into(), self.synth.classes.to_string()),
            (
                "synth.centers_per_class".into(),
                self.synth.centers_per_class.to_string(),
            ),
            ("synth.kappa".into(), self.synth.kappa.to_string()),
            (
                "synth.feature_noise".into(),
                self.synth.feature_noise.to_string(),
            ),
            (
                "synth.train_examples".into(),
                self.synth.train_examples.to_string(),
            ),
            (
                "synth.eval_examples".into(),
                self.synth.eval_examples.to_string(),
            ),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 hex digest of the canonical serialization.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short label for the model variant this config trains.
    pub fn variant_label(&self) -> String {
        match self.pretrain.objective {
            None => format!("sup-only-{}", self.encoder.kind.name()),
            Some(LossKind::Mse) => "mse".to_string(),
            Some(obj) => format!("{}-{}", obj.name(), self.pretrain.components.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn file_parse_applies_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(
            &path,
            "# experiment\nseed = 9\npretrain.objective = nce   # binary loss\nencoder.kind = wrap\n\n",
        )
        .unwrap();
        let cfg = TrainConfig::load(&path, &[("lambda".into(), "20".into())]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pretrain.objective, Some(LossKind::Nce));
        assert_eq!(cfg.encoder.kind, EncoderKind::Wrap);
        assert_eq!(cfg.lambda, 20.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set_key("no.such.key", "1").is_err());
        assert!(cfg.set_key("pretrain.lr", "fast").is_err());
        assert!(cfg.set_key("pretrain.objective", "zen").is_err());
    }

    #[test]
    fn validation_catches_out_of_range_fields() {
        let mut cfg = TrainConfig::default();
        cfg.lambda = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.pretrain.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.encoder.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_iff_a_field_changes() {
        let base = TrainConfig::default();
        let base_hash = base.config_hash();
        assert_eq!(base_hash, TrainConfig::default().config_hash());

        // Flipping each representative field must change the hash.
        let edits: Vec<(&str, &str)> = vec![
            ("seed", "1"),
            ("d", "64"),
            ("encoder.kind", "wrap"),
            ("encoder.dropout", "0.25"),
            ("pretrain.objective", "none"),
            ("pretrain.components", "b"),
            ("pretrain.tau1", "0.5"),
            ("finetune.beta", "2"),
            ("lambda_list", "5,10"),
            ("data.train", "somewhere.txt"),
            ("synth.kappa", "7"),
        ];
        for (key, value) in edits {
            let mut cfg = TrainConfig::default();
            cfg.set_key(key, value).unwrap();
            assert_ne!(cfg.config_hash(), base_hash, "hash unchanged for {key}");
        }
    }

    #[test]
    fn variant_labels() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.variant_label(), "mc-bld");
        cfg.set_key("pretrain.objective", "none").unwrap();
        assert_eq!(cfg.variant_label(), "sup-only-grid");
        cfg.set_key("pretrain.objective", "mse").unwrap();
        assert_eq!(cfg.variant_label(), "mse");
        cfg.set_key("pretrain.objective", "nce").unwrap();
        cfg.set_key("pretrain.components", "bd").unwrap();
        assert_eq!(cfg.variant_label(), "nce-bd");
    }
}
