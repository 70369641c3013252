use std::collections::BTreeMap;

use hyperadapt::adapters::{effective_delta_w, AdapterId, SvdAdapter};
use hyperadapt::rank_allocator::{apply_prune, collect_scores, select_prune, total_effective_rank, ImportanceRecord};
use hyperadapt::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Coarse value grid so equal scores (and the tie-break) come up often.
fn grid() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![-1.0, -0.5, 0.0, 0.5, 1.0, 2.0])
}

#[derive(Debug, Clone)]
struct Toy {
    lambdas: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
}

fn toy() -> impl Strategy<Value = Toy> {
    (1usize..=4, 1usize..=6)
        .prop_flat_map(|(n, r)| {
            (
                prop::collection::vec(prop::collection::vec(grid(), r), n),
                prop::collection::vec(prop::collection::vec(grid(), r), n),
                prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.8), r), n),
            )
        })
        .prop_map(|(lambdas, grads, masks)| Toy { lambdas, grads, masks })
}

fn build(t: &Toy, d: usize) -> (Vec<SvdAdapter>, BTreeMap<AdapterId, Vec<f64>>) {
    let mut ads = Vec::new();
    let mut grads = BTreeMap::new();
    // reversed ids: the allocator must not depend on slice order
    for (n, lambda) in t.lambdas.iter().enumerate().rev() {
        let r = lambda.len();
        let p = Tensor::from_vec(&[d, r], (0..d * r).map(|i| ((i * 7 + n) as f64).sin()).collect()).unwrap();
        let q = Tensor::from_vec(&[r, d], (0..d * r).map(|i| ((i * 3 + n) as f64).cos()).collect()).unwrap();
        let mut ad = SvdAdapter::new(AdapterId(n as u32), p, Tensor::from_vec(&[r], lambda.clone()).unwrap(), q).unwrap();
        ad.mask = t.masks[n].clone();
        ads.push(ad);
        grads.insert(AdapterId(n as u32), t.grads[n].clone());
    }
    (ads, grads)
}

/// Brute force: repeatedly scan every unmasked slot for the smallest
/// `(|σ·g|, adapter, index)`.
fn oracle(t: &Toy, k: usize) -> Vec<(AdapterId, usize)> {
    let mut taken = Vec::new();
    for _ in 0..k {
        let mut best: Option<(f64, usize, usize)> = None;
        for (n, lambda) in t.lambdas.iter().enumerate() {
            for j in 0..lambda.len() {
                if !t.masks[n][j] || taken.contains(&(n, j)) {
                    continue;
                }
                let s = (lambda[j] * t.grads[n][j]).abs();
                let better = match best {
                    None => true,
                    Some((bs, bn, bj)) => s < bs || (s == bs && (n, j) < (bn, bj)),
                };
                if better {
                    best = Some((s, n, j));
                }
            }
        }
        match best {
            Some((_, n, j)) => taken.push((n, j)),
            None => break,
        }
    }
    taken.into_iter().map(|(n, j)| (AdapterId(n as u32), j)).collect()
}

fn numerical_rank(m: &Tensor) -> usize {
    let (r, c) = (m.rows(), m.cols());
    let svd = DMatrix::from_row_slice(r, c, &m.to_vec()).svd(false, false);
    let top = svd.singular_values.max();
    svd.singular_values.iter().filter(|&&s| s > 1e-10 * top.max(1.0)).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn selection_matches_brute_force(t in toy(), k in 0usize..30) {
        let (ads, grads) = build(&t, 6);
        let records: Vec<ImportanceRecord> = collect_scores(&ads, &grads).unwrap();
        prop_assert_eq!(select_prune(&records, k), oracle(&t, k));
    }

    #[test]
    fn rank_drops_by_budget_per_event(t in toy(), k in 1usize..3) {
        let (mut ads, grads) = build(&t, 8);
        let start = total_effective_rank(&ads);
        let events = start / k;
        for e in 1..=events {
            let records = collect_scores(&ads, &grads).unwrap();
            apply_prune(&mut ads, &select_prune(&records, k), true).unwrap();
            prop_assert_eq!(total_effective_rank(&ads), start - e * k);
            for ad in &ads {
                prop_assert!(numerical_rank(&effective_delta_w(ad).unwrap()) <= ad.effective_rank());
            }
        }
    }
}
