//! Metrics CSV, convergence analysis and the JSON reports of each subcommand.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};

use hyperadapt::trainer::StepMetrics;

pub const CSV_HEADER: &str = "step,task_loss,orth_penalty,total_loss,lr,effective_rank,wall_ms,peak_param_bytes";

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub step: u64,
    pub task_loss: f64,
    pub orth_penalty: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub effective_rank: usize,
    pub wall_ms: f64,
    pub peak_param_bytes: u64,
}

impl From<&StepMetrics> for CsvRow {
    fn from(m: &StepMetrics) -> Self {
        Self {
            step: m.step,
            task_loss: m.task_loss,
            orth_penalty: m.orth_penalty_value,
            total_loss: m.total_loss,
            lr: m.lr,
            effective_rank: m.effective_rank_total,
            wall_ms: m.wall_clock_ms,
            peak_param_bytes: m.peak_param_bytes,
        }
    }
}

pub fn write_metrics<W: Write>(w: W, metrics: &[StepMetrics]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for m in metrics {
        out.serialize(CsvRow::from(m))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics<R: std::io::Read>(r: R) -> csv::Result<Vec<CsvRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

/// Trailing means over full windows: entry `i` averages `values[i..i + window]`
/// and belongs to step `i + window - 1`.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// First step whose smoothed loss is at or below `threshold`.
pub fn steps_to_threshold(losses: &[f64], window: usize, threshold: f64) -> Option<u64> {
    smoothed(losses, window)
        .iter()
        .position(|&v| v <= threshold)
        .map(|i| (i + window - 1) as u64)
}

/// Convergence step, or the sentinel `"not reached"` in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Reached {
    At(u64),
    NotReached,
}

impl From<Option<u64>> for Reached {
    fn from(s: Option<u64>) -> Self {
        s.map_or(Reached::NotReached, Reached::At)
    }
}

impl fmt::Display for Reached {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reached::At(s) => write!(f, "{s}"),
            Reached::NotReached => f.write_str("not reached"),
        }
    }
}

impl Serialize for Reached {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Reached::At(v) => s.serialize_u64(*v),
            Reached::NotReached => s.serialize_str("not reached"),
        }
    }
}

/// Median of the cells, where "not reached" ranks above every step. `None`
/// when the median itself falls on an unreached cell.
pub fn median_steps(cells: &[Reached]) -> Option<f64> {
    if cells.is_empty() {
        return None;
    }
    let mut v = cells.to_vec();
    v.sort();
    let n = v.len();
    let at = |i: usize| match v[i] {
        Reached::At(s) => Some(s as f64),
        Reached::NotReached => None,
    };
    if n % 2 == 1 {
        at(n / 2)
    } else {
        Some(0.5 * (at(n / 2 - 1)? + at(n / 2)?))
    }
}

/// `numerator / denominator`, kept as a pair so that swapping the modes swaps
/// them exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratio {
    pub numerator: f64,
    pub denominator: f64,
    pub value: f64,
}

impl Ratio {
    pub fn new(numerator: f64, denominator: f64) -> Self {
        Self {
            numerator,
            denominator,
            value: numerator / denominator,
        }
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.denominator, self.numerator)
    }
}

/// Mean and 95th percentile (nearest rank) of per-step wall-clock times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub steps: usize,
}

impl Latency {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        let mut v = ms.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = ((0.95 * v.len() as f64).ceil() as usize).max(1);
        Some(Self {
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p95_ms: v[rank - 1],
            steps: v.len(),
        })
    }

    /// Standard deviation over mean.
    pub fn coefficient_of_variation(ms: &[f64]) -> f64 {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    }
}

/// Report of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub metrics_csv: String,
    pub steps: u64,
    pub initial_smoothed_loss: f64,
    pub final_smoothed_loss: f64,
    pub threshold: f64,
    pub steps_to_threshold: Reached,
    pub latency: Option<Latency>,
    pub peak_param_bytes: u64,
    pub prune_events: usize,
    pub final_effective_rank: usize,
}

/// A run that did not finish.
#[derive(Debug, Clone, Serialize)]
pub struct FailedCell {
    pub mode: String,
    pub seed: u64,
    pub error: String,
}

/// Per-mode aggregate of a comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: String,
    pub steps_to_threshold: Vec<Reached>,
    pub median_steps_to_threshold: Option<f64>,
    /// This mode over the baseline (first-listed) mode.
    pub ratio_vs_baseline: Option<Ratio>,
    pub latency_mean_ms: Option<f64>,
    pub latency_p95_ms: Option<f64>,
    pub peak_param_bytes: Option<u64>,
    pub failed_cells: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub baseline: String,
    pub seeds: u64,
    pub modes: Vec<ModeSummary>,
    pub runs: Vec<RunReport>,
    pub failed: Vec<FailedCell>,
}

impl CompareReport {
    /// Aggregates finished `runs` per mode, in the order of `modes`.
    pub fn build(modes: &[String], seeds: u64, runs: Vec<RunReport>, failed: Vec<FailedCell>) -> Self {
        let mut summaries: Vec<ModeSummary> = modes
            .iter()
            .map(|mode| {
                let mine: Vec<&RunReport> = runs.iter().filter(|r| &r.mode == mode).collect();
                let fails = failed.iter().filter(|f| &f.mode == mode).count();
                let mut steps: Vec<Reached> = mine.iter().map(|r| r.steps_to_threshold).collect();
                steps.extend(std::iter::repeat_n(Reached::NotReached, fails));
                let lat: Vec<&Latency> = mine.iter().filter_map(|r| r.latency.as_ref()).collect();
                let mean_of = |f: fn(&Latency) -> f64| {
                    (!lat.is_empty()).then(|| lat.iter().map(|l| f(l)).sum::<f64>() / lat.len() as f64)
                };
                ModeSummary {
                    mode: mode.clone(),
                    median_steps_to_threshold: median_steps(&steps),
                    steps_to_threshold: steps,
                    ratio_vs_baseline: None,
                    latency_mean_ms: mean_of(|l| l.mean_ms),
                    latency_p95_ms: mean_of(|l| l.p95_ms),
                    peak_param_bytes: mine.iter().map(|r| r.peak_param_bytes).max(),
                    failed_cells: fails,
                }
            })
            .collect();
        let base = summaries.first().and_then(|s| s.median_steps_to_threshold);
        for s in &mut summaries {
            s.ratio_vs_baseline = match (s.median_steps_to_threshold, base) {
                (Some(n), Some(d)) if d > 0.0 => Some(Ratio::new(n, d)),
                _ => None,
            };
        }
        Self {
            baseline: modes.first().cloned().unwrap_or_default(),
            seeds,
            modes: summaries,
            runs,
            failed,
        }
    }

    /// Fixed-width table of the per-mode summary.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = format!(
            "{:<24} {:>10} {:>8} {:>10} {:>10} {:>12} {:>6}\n",
            "mode", "median", "ratio", "mean_ms", "p95_ms", "param_bytes", "failed"
        );
        for m in &self.modes {
            s += &format!(
                "{:<24} {:>10} {:>8} {:>10} {:>10} {:>12} {:>6}\n",
                m.mode,
                m.median_steps_to_threshold.map_or("not reached".into(), |x| format!("{x}")),
                opt(m.ratio_vs_baseline.map(|r| r.value), 3),
                opt(m.latency_mean_ms, 3),
                opt(m.latency_p95_ms, 3),
                m.peak_param_bytes.map_or("-".into(), |b| b.to_string()),
                m.failed_cells,
            );
        }
        s
    }
}

/// Task loss of every run side by side, one column per `mode/seed` cell.
/// Failed or shorter runs leave their cells empty.
pub fn write_curves<W: Write>(w: W, columns: &[(String, Vec<f64>)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["step".to_string()];
    header.extend(columns.iter().map(|(name, _)| name.clone()));
    out.write_record(&header)?;
    let len = columns.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    for i in 0..len {
        let mut row = vec![i.to_string()];
        row.extend(columns.iter().map(|(_, v)| v.get(i).map_or(String::new(), |x| x.to_string())));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
