use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::DEFAULT_MAX_SEQ_LEN;
use crate::identification::{ClozePrompt, IdentificationLossConfig, LossKind};
use crate::localization::{CrfOptions, LocalizerSettings, PromptMode};
use crate::types::DEFAULT_MAX_KEYWORDS;
use crate::verbalizer::Aggregation;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: PathBuf, line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("invalid JSON config {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("`{0}` must be positive")]
    NotPositive(&'static str),
    #[error("`{0}` must be non-negative and finite")]
    Negative(&'static str),
    #[error("unsupported encoder `{0}`; only `toy` is built in")]
    UnsupportedEncoder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
}

/// Every knob of a run. Defaults are the few-shot hyperparameters; see
/// [`RunConfig::supervised`] for the full-data preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: String,
    pub dim: usize,
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub adam_epsilon: f64,
    pub grad_clip: f64,
    pub loss: LossKind,
    pub margin: f64,
    pub prompt: ClozePrompt,
    pub aggregation: Aggregation,
    pub prompt_mode: PromptMode,
    pub max_keywords: usize,
    pub attention: bool,
    pub constrained: bool,
    pub prompt_keys: bool,
    /// Negative (all-`O`) localization pairs per positive pair.
    pub negative_pair_ratio: f64,
    pub auto_verbalizers: bool,
    pub verbalizers_per_type: usize,
    pub seed: u64,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub null_pool: Option<PathBuf>,
    pub null_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: "toy".into(),
            dim: 32,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            batch_size: 8,
            learning_rate: 2e-5,
            schedule: Schedule::Linear,
            weight_decay: 1e-5,
            warmup_steps: 0,
            epochs: 20,
            adam_epsilon: 1e-8,
            grad_clip: 1.0,
            loss: LossKind::ThresholdCe,
            margin: 1.0,
            prompt: ClozePrompt::default(),
            aggregation: Aggregation::Avg,
            prompt_mode: PromptMode::default(),
            max_keywords: DEFAULT_MAX_KEYWORDS,
            attention: true,
            constrained: true,
            prompt_keys: true,
            negative_pair_ratio: 1.0,
            auto_verbalizers: false,
            verbalizers_per_type: 1,
            seed: 0,
            train: None,
            dev: None,
            ontology: None,
            null_pool: None,
            null_ratio: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_enum<T: DeserializeOwned>(key: &str, value: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(value.into())).map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    /// Few-shot preset (batch 8, lr 2e-5, no warmup, 20 epochs).
    pub fn few_shot() -> Self {
        RunConfig::default()
    }

    /// Full-data preset (batch 16, lr 1e-5, 1000 warmup steps, 10 epochs).
    pub fn supervised() -> Self {
        RunConfig {
            batch_size: 16,
            learning_rate: 1e-5,
            warmup_steps: 1000,
            epochs: 10,
            ..RunConfig::default()
        }
    }

    /// Every key accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "encoder",
        "dim",
        "max_seq_len",
        "batch_size",
        "learning_rate",
        "schedule",
        "weight_decay",
        "warmup_steps",
        "epochs",
        "adam_epsilon",
        "grad_clip",
        "loss",
        "margin",
        "prompt",
        "aggregation",
        "prompt_mode",
        "max_keywords",
        "attention",
        "constrained",
        "prompt_keys",
        "negative_pair_ratio",
        "auto_verbalizers",
        "verbalizers_per_type",
        "seed",
        "train",
        "dev",
        "ontology",
        "null_pool",
        "null_ratio",
    ];

    /// Sets one field from its textual form. Dashes in keys are accepted as
    /// underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let value = value.trim();
        match k {
            "encoder" => self.encoder = value.into(),
            "dim" => self.dim = parse(k, value)?,
            "max_seq_len" => self.max_seq_len = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "learning_rate" => self.learning_rate = parse(k, value)?,
            "schedule" => self.schedule = parse_enum(k, value)?,
            "weight_decay" => self.weight_decay = parse(k, value)?,
            "warmup_steps" => self.warmup_steps = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "adam_epsilon" => self.adam_epsilon = parse(k, value)?,
            "grad_clip" => self.grad_clip = parse(k, value)?,
            "loss" => self.loss = parse_enum(k, value)?,
            "margin" => self.margin = parse(k, value)?,
            "prompt" => self.prompt = parse_enum(k, value)?,
            "aggregation" => self.aggregation = parse_enum(k, value)?,
            "prompt_mode" => self.prompt_mode = parse_enum(k, value)?,
            "max_keywords" => self.max_keywords = parse(k, value)?,
            "attention" => self.attention = parse(k, value)?,
            "constrained" => self.constrained = parse(k, value)?,
            "prompt_keys" => self.prompt_keys = parse(k, value)?,
            "negative_pair_ratio" => self.negative_pair_ratio = parse(k, value)?,
            "auto_verbalizers" => self.auto_verbalizers = parse(k, value)?,
            "verbalizers_per_type" => self.verbalizers_per_type = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "train" => self.train = Some(value.into()),
            "dev" => self.dev = Some(value.into()),
            "ontology" => self.ontology = Some(value.into()),
            "null_pool" => self.null_pool = Some(value.into()),
            "null_ratio" => self.null_ratio = parse(k, value)?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_key_values(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_owned(),
                line: i + 1,
            })?;
            config.set(key, value)?;
        }
        Ok(config)
    }

    /// Loads a `.json` or `key = value` config. Relative data paths are
    /// resolved against the config file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|source| ConfigError::Json {
                path: path.to_owned(),
                source,
            })?
        } else {
            RunConfig::parse_key_values(&text, path)?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.train, &mut config.dev, &mut config.ontology, &mut config.null_pool]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.encoder != "toy" {
            return Err(ConfigError::UnsupportedEncoder(self.encoder.clone()));
        }
        let positive_usize = [
            ("dim", self.dim),
            ("max_seq_len", self.max_seq_len),
            ("batch_size", self.batch_size),
            ("verbalizers_per_type", self.verbalizers_per_type),
        ];
        for (name, v) in positive_usize {
            if v == 0 {
                return Err(ConfigError::NotPositive(name));
            }
        }
        let positive_f64 = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("grad_clip", self.grad_clip),
            ("margin", self.margin),
        ];
        for (name, v) in positive_f64 {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::NotPositive(name));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("negative_pair_ratio", self.negative_pair_ratio),
            ("null_ratio", self.null_ratio),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::Negative(name));
            }
        }
        Ok(())
    }

    pub fn crf_options(&self) -> CrfOptions {
        CrfOptions {
            attention_enabled: self.attention,
            constrained: self.constrained,
            prompt_keys: self.prompt_keys,
        }
    }

    pub fn localizer_settings(&self) -> LocalizerSettings {
        LocalizerSettings {
            prompt: self.prompt.clone(),
            mode: self.prompt_mode,
            max_keywords: self.max_keywords,
        }
    }

    pub fn loss_config(&self) -> IdentificationLossConfig {
        IdentificationLossConfig {
            kind: self.loss,
            margin: self.margin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let f = RunConfig::few_shot();
        assert_eq!((f.batch_size, f.learning_rate, f.warmup_steps, f.epochs), (8, 2e-5, 0, 20));
        assert_eq!((f.weight_decay, f.adam_epsilon, f.grad_clip, f.max_seq_len), (1e-5, 1e-8, 1.0, 200));
        let s = RunConfig::supervised();
        assert_eq!((s.batch_size, s.learning_rate, s.warmup_steps, s.epochs), (16, 1e-5, 1000, 10));
        f.validate().unwrap();
        s.validate().unwrap();
    }

    #[test]
    fn key_values_and_overrides() {
        let text = "# toy\nepochs = 3\nloss=margin\naggregation = wavg\nprompt_mode = verbalizer_only\nattention = false\nprompt = It was a [MASK] event.\n";
        let mut c = RunConfig::parse_key_values(text, Path::new("x.cfg")).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.loss, LossKind::Margin);
        assert_eq!(c.aggregation, Aggregation::WeightedAvg);
        assert_eq!(c.prompt_mode, PromptMode::VerbalizerOnly);
        assert!(!c.attention);
        assert_eq!(c.prompt.template(), "It was a [MASK] event.");
        c.set("learning-rate", "0.5").unwrap();
        assert_eq!(c.learning_rate, 0.5);
        assert!(matches!(c.set("nope", "1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.set("epochs", "x"), Err(ConfigError::InvalidValue { .. })));
        assert!(c.set("prompt", "no mask").is_err());
        assert!(matches!(
            RunConfig::parse_key_values("epochs 3", Path::new("x.cfg")),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        for key in RunConfig::KEYS {
            assert!(!matches!(c.set(key, "?"), Err(ConfigError::UnknownKey(_))), "{key}");
        }
    }

    #[test]
    fn validation_rejects_nonpositive() {
        let c = RunConfig {
            batch_size: 0,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(ConfigError::NotPositive("batch_size"))));
        let c = RunConfig {
            learning_rate: -1.0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            encoder: "bert".into(),
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(ConfigError::UnsupportedEncoder(_))));
    }

    #[test]
    fn json_round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig {
            train: Some("train.jsonl".into()),
            epochs: 7,
            ..RunConfig::default()
        };
        let path = dir.path().join("run.json");
        std::fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
        let back = RunConfig::from_file(&path).unwrap();
        assert_eq!(back.epochs, 7);
        assert_eq!(back.train.unwrap(), dir.path().join("train.jsonl"));
    }
}
