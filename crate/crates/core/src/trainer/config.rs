use std::fmt;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::hypernet::{BackendKind, HyperBackend};
use crate::init::INIT_STD;
use crate::rank_allocator::PruneSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lora,
    HyperLora,
    Adalora,
    HyperAdalora,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Lora, Mode::HyperLora, Mode::Adalora, Mode::HyperAdalora];

    pub fn is_hyper(self) -> bool {
        matches!(self, Mode::HyperLora | Mode::HyperAdalora)
    }

    /// Modes that keep the SVD form, its penalty and its pruning.
    pub fn is_svd(self) -> bool {
        matches!(self, Mode::Adalora | Mode::HyperAdalora)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lora => "lora",
            Mode::HyperLora => "hyper_lora",
            Mode::Adalora => "adalora",
            Mode::HyperAdalora => "hyper_adalora",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected lora, hyper_lora, adalora or hyper_adalora)"))
    }
}

/// Pruning settings before they are resolved against the run length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_delta_t")]
    pub delta_t: u64,
    #[serde(default = "one")]
    pub k: usize,
    /// Defaults to the end of warm-up.
    #[serde(default)]
    pub start_step: Option<u64>,
    /// Defaults to `end_fraction` of the run.
    #[serde(default)]
    pub end_step: Option<u64>,
    #[serde(default = "default_end_fraction")]
    pub end_fraction: f64,
    #[serde(default)]
    pub min_total_rank: usize,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn default_delta_t() -> u64 {
    50
}
fn default_end_fraction() -> f64 {
    0.8
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            delta_t: default_delta_t(),
            k: 1,
            start_step: None,
            end_step: None,
            end_fraction: default_end_fraction(),
            min_total_rank: 0,
        }
    }
}

impl PruneConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Hypernetwork backend; hyper modes only, attention when omitted.
    #[serde(default)]
    pub backend: Option<BackendKind>,
    /// Full backend architecture; overrides the defaults of `backend`.
    #[serde(default)]
    pub hypernet: Option<HyperBackend>,
    #[serde(default = "default_lr")]
    pub lr_max: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub total_steps: u64,
    /// Defaults to 5% of `total_steps`, at least 1.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prune: PruneConfig,
    /// Global gradient-norm clip; off when omitted.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Write measured step times into the metrics; off keeps metrics reproducible.
    #[serde(default)]
    pub record_wall_clock: bool,
    /// Learning-rate multiplier for the shared hypernetwork core (projections
    /// use `lr` as is). Defaults per backend, see [`TrainConfig::core_lr_scale`].
    #[serde(default)]
    pub core_lr_scale: Option<f64>,
}

fn default_lr() -> f64 {
    1e-5
}
fn default_gamma() -> f64 {
    0.1
}
fn default_rank() -> usize {
    3
}
fn default_batch() -> usize {
    8
}
fn default_init_std() -> f64 {
    INIT_STD
}

impl TrainConfig {
    pub fn new(mode: Mode, total_steps: u64) -> Self {
        Self {
            mode,
            backend: None,
            hypernet: None,
            lr_max: default_lr(),
            gamma: default_gamma(),
            rank: default_rank(),
            batch_size: default_batch(),
            total_steps,
            warmup_steps: None,
            seed: 0,
            prune: PruneConfig::default(),
            grad_clip: None,
            init_std: INIT_STD,
            record_wall_clock: false,
            core_lr_scale: None,
        }
    }

    /// Core learning-rate multiplier: 0.01 for attention, whose post-norm
    /// encoder degrades the generated steps into noise at the full rate, and 1
    /// for the MLP and conv cores.
    pub fn core_lr_scale(&self) -> f64 {
        self.core_lr_scale.unwrap_or(match self.hyper_backend().map(|b| b.kind()) {
            Some(BackendKind::Attention) => 0.01,
            _ => 1.0,
        })
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| (self.total_steps * 5).div_ceil(100).max(1))
    }

    /// Backend architecture for hyper modes.
    pub fn hyper_backend(&self) -> Option<HyperBackend> {
        if !self.mode.is_hyper() {
            return None;
        }
        Some(match (&self.hypernet, self.backend) {
            (Some(h), _) => h.clone(),
            (None, Some(kind)) => HyperBackend::default_for(kind),
            (None, None) => HyperBackend::attention(),
        })
    }

    /// Pruning schedule for SVD modes; `None` when pruning is off or not applicable.
    pub fn prune_schedule(&self) -> Option<PruneSchedule> {
        if !self.mode.is_svd() || !self.prune.enabled {
            return None;
        }
        let p = &self.prune;
        Some(PruneSchedule {
            delta_t: p.delta_t,
            k: p.k,
            start_step: p.start_step.unwrap_or_else(|| self.warmup()),
            end_step: p
                .end_step
                .unwrap_or_else(|| (self.total_steps as f64 * p.end_fraction).floor() as u64),
            min_total_rank: p.min_total_rank,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, msg: String| Err(TrainError::Config(format!("{field}: {msg}")));
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return bad("lr_max", format!("must be positive, got {}", self.lr_max));
        }
        if let Some(c) = self.core_lr_scale {
            if !self.mode.is_hyper() {
                return bad("core_lr_scale", format!("mode {} has no hypernetwork", self.mode));
            }
            if !(c.is_finite() && c >= 0.0) {
                return bad("core_lr_scale", format!("must be non-negative, got {c}"));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma", format!("must be non-negative, got {}", self.gamma));
        }
        if self.rank == 0 {
            return bad("rank", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be at least 1".into());
        }
        let warmup = self.warmup();
        if warmup == 0 {
            return bad("warmup_steps", "must be at least 1".into());
        }
        if self.total_steps <= warmup {
            return bad(
                "total_steps",
                format!("{} must exceed warmup_steps {warmup}", self.total_steps),
            );
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std", format!("must be positive, got {}", self.init_std));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        if !self.mode.is_hyper() && (self.backend.is_some() || self.hypernet.is_some()) {
            return bad("backend", format!("mode {} has no hypernetwork", self.mode));
        }
        if let Some(h) = &self.hypernet {
            if let Some(kind) = self.backend {
                if h.kind() != kind {
                    return bad("hypernet", format!("architecture is {} but backend is {kind}", h.kind()));
                }
            }
            h.validate().map_err(|e| TrainError::Config(format!("hypernet: {e}")))?;
        }
        let p = &self.prune;
        if p.enabled {
            if p.delta_t == 0 {
                return bad("prune.delta_t", "must be at least 1".into());
            }
            if p.k == 0 {
                return bad("prune.k", "must be at least 1".into());
            }
            if !(0.0..=1.0).contains(&p.end_fraction) {
                return bad("prune.end_fraction", format!("must lie in [0, 1], got {}", p.end_fraction));
            }
        }
        Ok(())
    }
}
