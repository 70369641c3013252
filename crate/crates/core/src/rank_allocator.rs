//! Importance scoring and global k-smallest pruning of singular values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterId, SvdAdapter};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PruneError {
    #[error("no singular-value gradient recorded for {0}")]
    MissingGrad(AdapterId),
    #[error("{id} gradient has length {got}, rank is {want}")]
    GradLength { id: AdapterId, got: usize, want: usize },
    #[error("selection names unknown {0}")]
    UnknownAdapter(AdapterId),
    #[error("{id} index {index} is already pruned")]
    AlreadyPruned { id: AdapterId, index: usize },
    #[error("{id} index {index} is out of range")]
    OutOfRange { id: AdapterId, index: usize },
}

/// When and how much to prune.
///
/// `min_total_rank` is a floor on the summed effective rank: the per-event
/// budget is clamped so the floor is never crossed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    pub delta_t: u64,
    pub k: usize,
    pub start_step: u64,
    pub end_step: u64,
    #[serde(default)]
    pub min_total_rank: usize,
}

impl PruneSchedule {
    /// Never fires.
    pub fn disabled() -> Self {
        Self {
            delta_t: 1,
            k: 1,
            start_step: u64::MAX,
            end_step: 0,
            min_total_rank: 0,
        }
    }

    /// Budget for one event given the current unmasked total.
    pub fn budget(&self, remaining: usize) -> usize {
        let available = remaining.saturating_sub(self.min_total_rank);
        if self.k > available {
            log::warn!(
                "prune budget {} clamped to {available} ({remaining} unmasked, floor {})",
                self.k,
                self.min_total_rank
            );
        }
        self.k.min(available)
    }
}

/// True on every `delta_t`-th step strictly after `start_step`, up to `end_step`.
pub fn should_prune(step: u64, sched: &PruneSchedule) -> bool {
    sched.delta_t > 0
        && step > sched.start_step
        && step <= sched.end_step
        && (step - sched.start_step).is_multiple_of(sched.delta_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub adapter_id: AdapterId,
    pub index: usize,
    pub sigma: f64,
    pub grad: f64,
    pub score: f64,
}

/// One record per unmasked singular value, ordered by `(adapter_id, index)`.
///
/// `sigma` comes from each adapter's `lambda` and `grad` from `lambda_grads`,
/// which must hold dL/dλ for every adapter.
pub fn collect_scores(
    adapters: &[SvdAdapter],
    lambda_grads: &BTreeMap<AdapterId, Vec<f64>>,
) -> Result<Vec<ImportanceRecord>, PruneError> {
    let mut sorted: Vec<&SvdAdapter> = adapters.iter().collect();
    sorted.sort_by_key(|a| a.id);
    let mut out = Vec::new();
    for ad in sorted {
        let grads = lambda_grads.get(&ad.id).ok_or(PruneError::MissingGrad(ad.id))?;
        if grads.len() != ad.rank() {
            return Err(PruneError::GradLength {
                id: ad.id,
                got: grads.len(),
                want: ad.rank(),
            });
        }
        let sigmas = ad.lambda_values();
        for (index, ((&keep, &sigma), &grad)) in ad.mask.iter().zip(&sigmas).zip(grads).enumerate() {
            if keep {
                out.push(ImportanceRecord {
                    adapter_id: ad.id,
                    index,
                    sigma,
                    grad,
                    score: (sigma * grad).abs(),
                });
            }
        }
    }
    Ok(out)
}

/// The `min(k, len)` records with smallest score; ties go to the smaller
/// `(adapter_id, index)`. Returned in selection order.
pub fn select_prune(records: &[ImportanceRecord], k: usize) -> Vec<(AdapterId, usize)> {
    let mut ranked: Vec<&ImportanceRecord> = records.iter().collect();
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.adapter_id.cmp(&b.adapter_id))
            .then(a.index.cmp(&b.index))
    });
    ranked.into_iter().take(k).map(|r| (r.adapter_id, r.index)).collect()
}

/// Clears the mask bit of every selected pair. With `zero_lambda` the stored
/// value is zeroed too (direct training, where λ itself is the parameter).
///
/// The whole selection is validated before anything is changed.
pub fn apply_prune(
    adapters: &mut [SvdAdapter],
    selection: &[(AdapterId, usize)],
    zero_lambda: bool,
) -> Result<(), PruneError> {
    let mut seen = std::collections::BTreeSet::new();
    for &(id, index) in selection {
        let ad = adapters
            .iter()
            .find(|a| a.id == id)
            .ok_or(PruneError::UnknownAdapter(id))?;
        if index >= ad.rank() {
            return Err(PruneError::OutOfRange { id, index });
        }
        if !ad.mask[index] || !seen.insert((id, index)) {
            return Err(PruneError::AlreadyPruned { id, index });
        }
    }
    for &(id, index) in selection {
        let ad = adapters.iter_mut().find(|a| a.id == id).expect("validated above");
        ad.mask[index] = false;
        if zero_lambda {
            ad.lambda.update_data(|v| v[index] = 0.0);
        }
    }
    Ok(())
}

pub fn total_effective_rank(adapters: &[SvdAdapter]) -> usize {
    adapters.iter().map(SvdAdapter::effective_rank).sum()
}

/// One line of the pruning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: u64,
    /// `[adapter_id, index, score]` triples.
    pub pruned: Vec<(u32, usize, f64)>,
    pub remaining_rank: usize,
}

impl PruneEvent {
    pub fn new(step: u64, records: &[ImportanceRecord], selection: &[(AdapterId, usize)], remaining_rank: usize) -> Self {
        let pruned = selection
            .iter()
            .map(|&(id, j)| {
                let score = records
                    .iter()
                    .find(|r| r.adapter_id == id && r.index == j)
                    .map_or(f64::NAN, |r| r.score);
                (id.0, j, score)
            })
            .collect();
        Self {
            step,
            pruned,
            remaining_rank,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("prune event serializes")
    }
}
