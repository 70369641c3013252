//! Declarative benchmark configuration, read from a single JSON file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use hyperadapt::hypernet::BackendKind;
use hyperadapt::trainer::{Mode, TrainConfig, TrainError};

use crate::task::TaskConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config at `{path}`: {message}")]
    Field { path: String, message: String },
}

impl ConfigError {
    fn field(path: &str, message: impl fmt::Display) -> Self {
        ConfigError::Field {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}

/// A mode, optionally pinned to a hypernetwork backend.
///
/// Written `lora`, `hyper_adalora`, `hyper_lora:mlp`, or `hyper:conv` (short
/// for `hyper_adalora:conv`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeSpec {
    pub mode: Mode,
    pub backend: Option<BackendKind>,
}

impl ModeSpec {
    pub fn new(mode: Mode) -> Self {
        Self { mode, backend: None }
    }

    /// `base` with this mode (and backend) substituted. Direct modes drop any
    /// hypernetwork settings of the base.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.mode = self.mode;
        if !self.mode.is_hyper() {
            cfg.backend = None;
            cfg.hypernet = None;
            cfg.core_lr_scale = None;
        } else if let Some(kind) = self.backend {
            cfg.backend = Some(kind);
            if cfg.hypernet.as_ref().is_some_and(|h| h.kind() != kind) {
                cfg.hypernet = None;
            }
        }
        cfg
    }
}

impl fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.backend {
            Some(b) => write!(f, "{}:{b}", self.mode),
            None => write!(f, "{}", self.mode),
        }
    }
}

impl FromStr for ModeSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (mode, backend) = match s.split_once(':') {
            Some((m, b)) => (m, Some(b.parse::<BackendKind>()?)),
            None => (s, None),
        };
        let mode = match mode {
            "hyper" => Mode::HyperAdalora,
            m => m.parse()?,
        };
        if backend.is_some() && !mode.is_hyper() {
            return Err(format!("mode {mode} takes no backend (in {s:?})"));
        }
        Ok(Self { mode, backend })
    }
}

impl Serialize for ModeSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModeSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub task: TaskConfig,
    pub train: TrainConfig,
    /// Cells of `compare`; the first entry is the baseline of every ratio.
    #[serde(default)]
    pub modes: Vec<ModeSpec>,
    /// Seeds `0..seeds` for `compare`.
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    /// Absolute task-loss threshold. When absent, `threshold_fraction` of the
    /// initial smoothed loss of each run.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default = "default_fraction")]
    pub threshold_fraction: f64,
    #[serde(default = "default_window")]
    pub smoothing_window: usize,
}

fn default_seeds() -> u64 {
    5
}
fn default_fraction() -> f64 {
    0.1
}
fn default_window() -> usize {
    20
}

impl BenchConfig {
    /// 64×64 two-layer regression, rank 3, batch 8, 2000 steps, γ = 0.1, 5
    /// seeds, lr 1e-2 for every mode, pruning floored at the planted rank.
    pub fn default_regression() -> Self {
        let task = TaskConfig::default();
        let mut train = TrainConfig::new(Mode::HyperAdalora, 2000);
        train.lr_max = 1e-2;
        train.prune.min_total_rank = task.planted_rank();
        Self {
            task,
            train,
            modes: ["adalora", "hyper_adalora", "lora", "hyper_lora"]
                .iter()
                .map(|m| m.parse().expect("known mode"))
                .collect(),
            seeds: default_seeds(),
            threshold: None,
            threshold_fraction: default_fraction(),
            smoothing_window: default_window(),
        }
    }

    /// Parses and validates `text`; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::field(&path, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The parsed config and the file text, kept verbatim for the run directory.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok((Self::from_json(&text)?, text))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task.validate().map_err(|m| match m.split_once(": ") {
            Some((path, msg)) => ConfigError::field(path, msg),
            None => ConfigError::field("task", m),
        })?;
        let train_err = |e: TrainError| match e {
            TrainError::Config(m) => match m.split_once(": ") {
                Some((field, msg)) => ConfigError::field(&format!("train.{field}"), msg),
                None => ConfigError::field("train", m),
            },
            other => ConfigError::field("train", other),
        };
        self.train.validate().map_err(train_err)?;
        for (i, spec) in self.modes.iter().enumerate() {
            spec.apply(&self.train)
                .validate()
                .map_err(|e| ConfigError::field(&format!("modes[{i}]"), format!("{spec}: {e}")))?;
        }
        if let Some(t) = self.threshold {
            if !(t.is_finite() && t > 0.0) {
                return Err(ConfigError::field("threshold", format!("must be positive, got {t}")));
            }
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return Err(ConfigError::field(
                "threshold_fraction",
                format!("must lie in (0, 1), got {}", self.threshold_fraction),
            ));
        }
        if self.smoothing_window == 0 {
            return Err(ConfigError::field("smoothing_window", "must be at least 1"));
        }
        if self.seeds == 0 {
            return Err(ConfigError::field("seeds", "must be at least 1"));
        }
        Ok(())
    }

    /// Task and training config of one cell. The seed drives both the task
    /// and the adapter initialization.
    pub fn cell(&self, spec: ModeSpec, seed: u64) -> (TaskConfig, TrainConfig) {
        let mut train = spec.apply(&self.train);
        train.seed = seed;
        (self.task.with_seed(seed), train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_specs_parse_and_print() {
        let s: ModeSpec = "hyper:mlp".parse().unwrap();
        assert_eq!((s.mode, s.backend), (Mode::HyperAdalora, Some(BackendKind::Mlp)));
        assert_eq!(s.to_string(), "hyper_adalora:mlp");
        assert_eq!("lora".parse::<ModeSpec>().unwrap().to_string(), "lora");
        assert!("lora:mlp".parse::<ModeSpec>().is_err());
        assert!("hyper:rnn".parse::<ModeSpec>().is_err());
    }

    #[test]
    fn unknown_mode_names_the_field() {
        let err = BenchConfig::from_json(r#"{"train": {"mode": "qlora", "total_steps": 50}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.mode") && msg.contains("qlora"), "{msg}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = BenchConfig::from_json(r#"{"train": {"mode": "lora", "total_steps": 50}, "sedes": 3}"#).unwrap_err();
        assert!(err.to_string().contains("sedes"), "{err}");
    }

    #[test]
    fn semantic_errors_carry_paths() {
        let err = BenchConfig::from_json(r#"{"train": {"mode": "lora", "total_steps": 50, "lr_max": -1}}"#).unwrap_err();
        assert!(err.to_string().contains("`train.lr_max`"), "{err}");
        let err = BenchConfig::from_json(
            r#"{"train": {"mode": "lora", "total_steps": 50}, "task": {"kind": "lowrank_regression", "true_rank": 0}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("`task.true_rank`"), "{err}");
    }

    #[test]
    fn direct_cells_drop_backend() {
        let mut cfg = BenchConfig::default_regression();
        cfg.train.backend = Some(BackendKind::Conv);
        cfg.validate().unwrap();
        let (_, train) = cfg.cell(ModeSpec::new(Mode::Lora), 3);
        assert_eq!((train.backend, train.seed), (None, 3));
    }

    #[test]
    fn default_round_trips_through_json() {
        let cfg = BenchConfig::default_regression();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(BenchConfig::from_json(&text).unwrap(), cfg);
    }
}
