//! Seeded synthetic tasks with a planted low-rank increment over frozen weights.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use hyperadapt::adapters::FrozenLinear;
use hyperadapt::trainer::{Batch, Network};
use hyperadapt::Tensor;

/// Streams of the task seed: frozen weights and planted increments, the
/// dataset, and minibatch sampling.
const TEACHER_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;
const BATCH_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// `y_l = (W0_l + ΔW_l) x + noise` for `layers` independent layers. Layer
    /// `l` has a planted increment of rank `max(1, true_rank - l)`.
    LowrankRegression {
        #[serde(default = "d64")]
        d1: usize,
        #[serde(default = "d64")]
        d2: usize,
        #[serde(default = "three")]
        true_rank: usize,
        #[serde(default = "two")]
        layers: usize,
        #[serde(default = "samples")]
        dataset_size: usize,
        #[serde(default = "noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Bag-of-tokens classification. Features are mean-pooled frozen
    /// embeddings; labels are the argmax of a teacher whose two layers carry
    /// planted rank-`true_rank` increments over the student's frozen weights.
    SeqClassification {
        #[serde(default = "vocab")]
        vocab: usize,
        #[serde(default = "seq_len")]
        seq_len: usize,
        #[serde(default = "classes")]
        classes: usize,
        #[serde(default = "d32")]
        embed_dim: usize,
        #[serde(default = "d32")]
        hidden_dim: usize,
        #[serde(default = "two")]
        true_rank: usize,
        #[serde(default = "samples")]
        dataset_size: usize,
        /// Probability that a label is replaced by a uniformly random class.
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn d64() -> usize {
    64
}
fn d32() -> usize {
    32
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn samples() -> usize {
    4096
}
fn noise() -> f64 {
    0.01
}
fn vocab() -> usize {
    100
}
fn seq_len() -> usize {
    12
}
fn classes() -> usize {
    4
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::LowrankRegression {
            d1: 64,
            d2: 64,
            true_rank: 3,
            layers: 2,
            dataset_size: samples(),
            noise: noise(),
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn seed(&self) -> u64 {
        match self {
            TaskConfig::LowrankRegression { seed, .. } | TaskConfig::SeqClassification { seed, .. } => *seed,
        }
    }

    pub fn with_seed(&self, s: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            TaskConfig::LowrankRegression { seed, .. } | TaskConfig::SeqClassification { seed, .. } => *seed = s,
        }
        out
    }

    /// Summed planted rank over layers; pruning never goes below it.
    pub fn planted_rank(&self) -> usize {
        match self {
            TaskConfig::LowrankRegression { true_rank, layers, .. } => {
                (0..*layers).map(|l| true_rank.saturating_sub(l).max(1)).sum()
            }
            TaskConfig::SeqClassification { true_rank, .. } => 2 * true_rank,
        }
    }

    /// Field-named validation message, if any.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            TaskConfig::LowrankRegression {
                d1,
                d2,
                true_rank,
                layers,
                dataset_size,
                noise,
                ..
            } => {
                if *d1 == 0 || *d2 == 0 {
                    return Err("task.d1/d2: must be positive".into());
                }
                if *true_rank == 0 || *true_rank > (*d1).min(*d2) {
                    return Err(format!("task.true_rank: must lie in 1..={}", d1.min(d2)));
                }
                if *layers == 0 {
                    return Err("task.layers: must be at least 1".into());
                }
                if *dataset_size == 0 {
                    return Err("task.dataset_size: must be at least 1".into());
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err("task.noise: must be non-negative".into());
                }
            }
            TaskConfig::SeqClassification {
                vocab,
                seq_len,
                classes,
                embed_dim,
                hidden_dim,
                true_rank,
                dataset_size,
                noise,
                ..
            } => {
                if *vocab == 0 || *seq_len == 0 || *embed_dim == 0 || *hidden_dim == 0 || *dataset_size == 0 {
                    return Err("task: vocab, seq_len, embed_dim, hidden_dim and dataset_size must be positive".into());
                }
                if *classes < 2 {
                    return Err("task.classes: need at least 2".into());
                }
                if *true_rank == 0 || *true_rank > (*classes).min(*embed_dim).min(*hidden_dim) {
                    return Err("task.true_rank: must be positive and fit every layer".into());
                }
                if !(0.0..=1.0).contains(noise) {
                    return Err("task.noise: label-flip probability must lie in [0, 1]".into());
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> SyntheticTask {
        match *self {
            TaskConfig::LowrankRegression {
                d1,
                d2,
                true_rank,
                layers,
                dataset_size,
                noise,
                seed,
            } => regression(d1, d2, true_rank, layers, dataset_size, noise, seed),
            TaskConfig::SeqClassification {
                vocab,
                seq_len,
                classes,
                embed_dim,
                hidden_dim,
                true_rank,
                dataset_size,
                noise,
                seed,
            } => classification(vocab, seq_len, classes, embed_dim, hidden_dim, true_rank, dataset_size, noise, seed),
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// `k` orthonormal vectors of length `n` by Gram-Schmidt on Gaussian draws.
pub fn orthonormal(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian(rng, n, 1.0);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Dense `Σ_i s_i u_i v_iᵀ` as a row-major `[m, n]` buffer.
fn planted(rng: &mut ChaCha8Rng, m: usize, n: usize, singular: &[f64]) -> Vec<f64> {
    let u = orthonormal(rng, m, singular.len());
    let v = orthonormal(rng, n, singular.len());
    let mut out = vec![0.0; m * n];
    for (k, s) in singular.iter().enumerate() {
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += s * u[k][i] * v[k][j];
            }
        }
    }
    out
}

/// Singular values of the planted increment: 2, 1.5, 1, 0.75, ...
fn spectrum(rank: usize) -> Vec<f64> {
    (0..rank).map(|i| 2.0 * 0.75f64.powi(i as i32)).collect()
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| w[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Debug, Clone)]
enum Samples {
    /// Inputs and per-layer targets, one vector per sample.
    Regression { x: Vec<Vec<f64>>, y: Vec<Vec<Vec<f64>>> },
    Classification { x: Vec<Vec<f64>>, labels: Vec<usize> },
}

/// A generated task: frozen layers, the network that wires them, and a fixed dataset.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub network: Network,
    /// `(weight, bias)` of each frozen layer, row-major.
    frozen: Vec<(usize, usize, Vec<f64>, Option<Vec<f64>>)>,
    samples: Samples,
    seed: u64,
}

fn regression(d1: usize, d2: usize, true_rank: usize, layers: usize, n: usize, noise: f64, seed: u64) -> SyntheticTask {
    let mut teacher = stream(seed, TEACHER_STREAM);
    let mut frozen = Vec::with_capacity(layers);
    let mut full = Vec::with_capacity(layers);
    for l in 0..layers {
        let w0 = gaussian(&mut teacher, d1 * d2, 1.0 / (d2 as f64).sqrt());
        let delta = planted(&mut teacher, d1, d2, &spectrum(true_rank.saturating_sub(l).max(1)));
        full.push(add(&w0, &delta));
        frozen.push((d1, d2, w0, None));
    }
    let mut data = stream(seed, DATA_STREAM);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = gaussian(&mut data, d2, 1.0);
        let y = full
            .iter()
            .map(|w| add(&matvec(w, d1, d2, &x), &gaussian(&mut data, d1, noise)))
            .collect();
        xs.push(x);
        ys.push(y);
    }
    SyntheticTask {
        network: Network::Regression,
        frozen,
        samples: Samples::Regression { x: xs, y: ys },
        seed,
    }
}

#[allow(clippy::too_many_arguments)]
fn classification(
    vocab: usize,
    seq_len: usize,
    classes: usize,
    embed_dim: usize,
    hidden_dim: usize,
    true_rank: usize,
    n: usize,
    noise: f64,
    seed: u64,
) -> SyntheticTask {
    let mut teacher = stream(seed, TEACHER_STREAM);
    let embedding = gaussian(&mut teacher, vocab * embed_dim, 1.0);
    let w_hidden = gaussian(&mut teacher, hidden_dim * embed_dim, 1.0 / (embed_dim as f64).sqrt());
    let w_out = gaussian(&mut teacher, classes * hidden_dim, 1.0 / (hidden_dim as f64).sqrt());
    let sing: Vec<f64> = spectrum(true_rank).iter().map(|s| s * 1.5).collect();
    let t_hidden = add(&w_hidden, &planted(&mut teacher, hidden_dim, embed_dim, &sing));
    let t_out = add(&w_out, &planted(&mut teacher, classes, hidden_dim, &sing));

    let mut data = stream(seed, DATA_STREAM);
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    // mean-pooled embeddings scaled back to unit variance
    let pool = (seq_len as f64).sqrt() / seq_len as f64;
    for _ in 0..n {
        let mut x = vec![0.0; embed_dim];
        for _ in 0..seq_len {
            let tok = data.random_range(0..vocab);
            for (xi, e) in x.iter_mut().zip(&embedding[tok * embed_dim..(tok + 1) * embed_dim]) {
                *xi += e * pool;
            }
        }
        let h: Vec<f64> = matvec(&t_hidden, hidden_dim, embed_dim, &x).into_iter().map(f64::tanh).collect();
        let logits = matvec(&t_out, classes, hidden_dim, &h);
        let mut label = (0..classes)
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .expect("at least two classes");
        if data.random::<f64>() < noise {
            label = data.random_range(0..classes);
        }
        xs.push(x);
        labels.push(label);
    }
    SyntheticTask {
        network: Network::Classifier,
        frozen: vec![
            (hidden_dim, embed_dim, w_hidden, None),
            (classes, hidden_dim, w_out, None),
        ],
        samples: Samples::Classification { x: xs, labels },
        seed,
    }
}

impl SyntheticTask {
    pub fn frozen_layers(&self) -> Vec<FrozenLinear> {
        self.frozen
            .iter()
            .map(|(d1, d2, w, b)| {
                let weight = Tensor::from_vec(&[*d1, *d2], w.clone()).expect("frozen weight shape");
                let bias = b.as_ref().map(|b| Tensor::from_vec(&[*d1], b.clone()).expect("bias shape"));
                FrozenLinear::new(weight, bias).expect("frozen layer")
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::Regression { x, .. } | Samples::Classification { x, .. } => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch of the given sample indices, one sample per column.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let columns = |rows: &[&Vec<f64>]| {
            let d = rows[0].len();
            let mut out = vec![0.0; d * rows.len()];
            for (c, r) in rows.iter().enumerate() {
                for (i, v) in r.iter().enumerate() {
                    out[i * rows.len() + c] = *v;
                }
            }
            Tensor::from_vec(&[d, rows.len()], out).expect("batch shape")
        };
        match &self.samples {
            Samples::Regression { x, y } => {
                let xs: Vec<&Vec<f64>> = idx.iter().map(|&i| &x[i]).collect();
                let layers = y[0].len();
                let targets = (0..layers)
                    .map(|l| columns(&idx.iter().map(|&i| &y[i][l]).collect::<Vec<_>>()))
                    .collect();
                Batch::Regression { x: columns(&xs), targets }
            }
            Samples::Classification { x, labels } => {
                let xs: Vec<&Vec<f64>> = idx.iter().map(|&i| &x[i]).collect();
                Batch::Classification {
                    x: columns(&xs),
                    labels: idx.iter().map(|&i| labels[i]).collect(),
                }
            }
        }
    }

    /// Minibatch sampler, with replacement; the order depends only on the task seed.
    pub fn sampler(&self, batch_size: usize) -> impl FnMut(u64) -> Batch + '_ {
        let mut rng = stream(self.seed, BATCH_STREAM);
        let all: Vec<usize> = (0..self.len()).collect();
        move |_| {
            let idx: Vec<usize> = (0..batch_size)
                .map(|_| *all.choose(&mut rng).expect("non-empty dataset"))
                .collect();
            self.batch(&idx)
        }
    }

    /// Share of samples whose label the frozen layers alone already predict;
    /// `None` for regression.
    pub fn frozen_accuracy(&self) -> Option<f64> {
        let Samples::Classification { x, labels } = &self.samples else {
            return None;
        };
        let (h, e, w_hidden, _) = &self.frozen[0];
        let (c, _, w_out, _) = &self.frozen[1];
        let hits = x
            .iter()
            .zip(labels)
            .filter(|(x, &l)| {
                let hid: Vec<f64> = matvec(w_hidden, *h, *e, x).into_iter().map(f64::tanh).collect();
                let logits = matvec(w_out, *c, *h, &hid);
                (0..*c).max_by(|&a, &b| logits[a].total_cmp(&logits[b])) == Some(l)
            })
            .count();
        Some(hits as f64 / x.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_basis() {
        let mut rng = stream(1, 0);
        let b = orthonormal(&mut rng, 10, 4);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_task() {
        let cfg = TaskConfig::default();
        let a = cfg.build().batch(&[0, 5]);
        let b = cfg.build().batch(&[0, 5]);
        let (Batch::Regression { x: xa, targets: ta }, Batch::Regression { x: xb, targets: tb }) = (a, b) else {
            panic!("regression batches expected");
        };
        assert_eq!(xa.to_vec(), xb.to_vec());
        assert_eq!(ta[1].to_vec(), tb[1].to_vec());
        let other = cfg.with_seed(1).build().batch(&[0, 5]);
        assert_ne!(other.input().to_vec(), xa.to_vec());
    }

    #[test]
    fn planted_rank_per_layer() {
        let cfg = TaskConfig::LowrankRegression {
            d1: 8,
            d2: 8,
            true_rank: 3,
            layers: 4,
            dataset_size: 4,
            noise: 0.0,
            seed: 0,
        };
        // layer ranks 3, 2, 1, 1
        assert_eq!(cfg.planted_rank(), 7);
    }

    #[test]
    fn classification_beats_chance_only_after_adaptation() {
        let cfg = TaskConfig::SeqClassification {
            vocab: 50,
            seq_len: 8,
            classes: 4,
            embed_dim: 16,
            hidden_dim: 16,
            true_rank: 2,
            dataset_size: 2000,
            noise: 0.0,
            seed: 3,
        };
        let task = cfg.build();
        let acc = task.frozen_accuracy().unwrap();
        assert!(acc < 0.9, "frozen layers already solve the task: {acc}");
        let Batch::Classification { labels, .. } = task.batch(&(0..2000).collect::<Vec<_>>()) else {
            panic!()
        };
        // every class occurs
        for c in 0..4 {
            assert!(labels.contains(&c));
        }
    }
}
