//! Training loop for the four adapter modes.

mod config;
mod model;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use config::{Mode, PruneConfig, TrainConfig};
pub use model::{init_params, AdapterState, Batch, HyperSet, Model, Network, ParamCounts, INIT_STREAM};

use crate::adapters::{orth_penalty, SvdAdapter};
use crate::hypernet::HyperError;
use crate::rank_allocator::PruneError;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Hyper(#[from] HyperError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error("non-finite loss at step {step}\n{}", dump(recent))]
    NonFinite { step: u64, recent: Vec<StepMetrics> },
}

fn dump(recent: &[StepMetrics]) -> String {
    let mut s = String::from("last metrics:\nstep,task_loss,orth_penalty,total_loss,lr,effective_rank");
    for m in recent {
        let _ = write!(
            s,
            "\n{},{},{},{},{},{}",
            m.step, m.task_loss, m.orth_penalty_value, m.total_loss, m.lr, m.effective_rank_total
        );
    }
    s
}

/// Per-step telemetry. `total_loss = task_loss + gamma * orth_penalty_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub task_loss: f64,
    pub orth_penalty_value: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub effective_rank_total: usize,
    pub wall_clock_ms: f64,
    pub peak_param_bytes: u64,
}

/// Linear warm-up from zero to `lr_max`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let warmup = cfg.warmup();
    let total = cfg.total_steps;
    if total <= warmup {
        return Err(TrainError::Config(format!(
            "total_steps: {total} must exceed warmup_steps {warmup}"
        )));
    }
    if step > total {
        return Err(TrainError::Config(format!("step {step} is past total_steps {total}")));
    }
    Ok(if step < warmup {
        cfg.lr_max * step as f64 / warmup as f64
    } else {
        let progress = (step - warmup) as f64 / (total - warmup) as f64;
        cfg.lr_max * 0.5 * (1.0 + (PI * progress).cos())
    })
}

/// Task loss plus the weighted orthogonality penalty.
pub struct CompositeLoss {
    pub total: Tensor,
    pub task: Tensor,
    pub penalty: Tensor,
}

/// `task + gamma * Σ orth_penalty(ad)` over `adapters`.
pub fn composite_loss(task: Tensor, adapters: &[SvdAdapter], gamma: f64) -> Result<CompositeLoss, TensorError> {
    let mut penalty = Tensor::scalar(0.0);
    for ad in adapters {
        penalty = penalty.add(&orth_penalty(ad)?)?;
    }
    let total = if gamma == 0.0 {
        task.clone()
    } else {
        task.add(&penalty.scale(gamma))?
    };
    Ok(CompositeLoss { total, task, penalty })
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments are keyed by tensor id, so parameters can
/// join the group at any time (new hypernetwork projections, for example).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: BTreeMap<u64, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamState {
    /// One update of every parameter that holds a gradient.
    pub fn step(&mut self, params: &[Tensor], lr: f64) {
        self.step_groups(&[(params, lr)]);
    }

    /// One update shared by several parameter groups, each with its own rate.
    pub fn step_groups(&mut self, groups: &[(&[Tensor], f64)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &(params, lr) in groups {
        for p in params {
            let Some(g) = p.grad() else { continue };
            let mo = self.moments.entry(p.id()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            p.update_data(|w| {
                for i in 0..w.len() {
                    mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g[i];
                    mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = mo.m[i] / bc1;
                    let v_hat = mo.v[i] / bc2;
                    w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        }
    }

    /// Clears both moments of entry `index` of `param`.
    pub fn reset_entry(&mut self, param: &Tensor, index: usize) {
        if let Some(mo) = self.moments.get_mut(&param.id()) {
            mo.m[index] = 0.0;
            mo.v[index] = 0.0;
        }
    }

    /// `(m, v)` for `param`, if it has been stepped.
    pub fn moments(&self, param: &Tensor) -> Option<(&[f64], &[f64])> {
        self.moments.get(&param.id()).map(|mo| (&mo.m[..], &mo.v[..]))
    }

    pub fn tracked_floats(&self) -> usize {
        self.moments.values().map(|mo| mo.m.len() + mo.v.len()).sum()
    }
}

/// Scales all gradients down so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &[Tensor], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.into_iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params {
            p.scale_grad(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterId;

    fn cfg(total: u64, warmup: u64) -> TrainConfig {
        let mut c = TrainConfig::new(Mode::Adalora, total);
        c.warmup_steps = Some(warmup);
        c.lr_max = 2e-3;
        c
    }

    #[test]
    fn lr_endpoints() {
        let c = cfg(1000, 100);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert!((lr_at(50, &c).unwrap() - 1e-3).abs() < 1e-18);
        assert_eq!(lr_at(100, &c).unwrap(), 2e-3);
        assert!(lr_at(1000, &c).unwrap().abs() < 1e-18);
        assert!(lr_at(1001, &c).is_err());
        assert!(matches!(lr_at(0, &cfg(100, 100)), Err(TrainError::Config(_))));
    }

    #[test]
    fn default_warmup_is_five_percent() {
        assert_eq!(TrainConfig::new(Mode::Lora, 2000).warmup(), 100);
        assert_eq!(TrainConfig::new(Mode::Lora, 50).warmup(), 3);
        assert_eq!(TrainConfig::new(Mode::Lora, 3).warmup(), 1);
    }

    #[test]
    fn composite_loss_by_hand() {
        let p = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]);
        let q = Tensor::eye(2);
        let ad = SvdAdapter::new(AdapterId(0), p, Tensor::zeros(&[2]), q).unwrap();
        let out = composite_loss(Tensor::scalar(1.0), std::slice::from_ref(&ad), 0.1).unwrap();
        assert_eq!(out.penalty.item(), 18.0);
        assert!((out.total.item() - 2.8).abs() < 1e-12);
        let zero = composite_loss(Tensor::scalar(1.25), &[ad], 0.0).unwrap();
        assert_eq!(zero.total.item(), 1.25);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g) (up to eps)
        let w = Tensor::param(&[2], vec![1.0, -1.0]).unwrap();
        w.mul(&Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap()).unwrap().sum().backward().unwrap();
        let mut adam = AdamState::default();
        adam.step(std::slice::from_ref(&w), 0.1);
        let v = w.to_vec();
        assert!((v[0] - 0.9).abs() < 1e-8 && (v[1] + 0.9).abs() < 1e-8, "{v:?}");
        assert_eq!(adam.tracked_floats(), 4);
        adam.reset_entry(&w, 1);
        assert_eq!(adam.moments(&w).unwrap().0[1], 0.0);
    }

    #[test]
    fn clipping_rescales() {
        let w = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        w.mul(&Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()).unwrap().sum().backward().unwrap();
        assert_eq!(clip_grad_norm(std::slice::from_ref(&w), 1.0), 5.0);
        let g = w.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = TrainConfig::new(Mode::Lora, 100);
        c.backend = Some(crate::hypernet::BackendKind::Mlp);
        assert!(c.validate().unwrap_err().to_string().contains("backend"));
        let mut c = TrainConfig::new(Mode::Adalora, 100);
        c.lr_max = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("lr_max"));
        let mut c = TrainConfig::new(Mode::Adalora, 10);
        c.warmup_steps = Some(10);
        assert!(c.validate().unwrap_err().to_string().contains("total_steps"));
        TrainConfig::new(Mode::HyperAdalora, 100).validate().unwrap();
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"mode":"lora","total_steps":5,"lr":1}"#).unwrap_err();
        assert!(err.to_string().contains("lr"));
        let err = serde_json::from_str::<TrainConfig>(r#"{"mode":"qlora","total_steps":5}"#).unwrap_err();
        assert!(err.to_string().contains("qlora"));
    }

    #[test]
    fn default_schedule_resolution() {
        let c = TrainConfig::new(Mode::HyperAdalora, 2000);
        let s = c.prune_schedule().unwrap();
        assert_eq!((s.start_step, s.end_step, s.delta_t, s.k), (100, 1600, 50, 1));
        assert!(TrainConfig::new(Mode::Lora, 2000).prune_schedule().is_none());
    }
}
