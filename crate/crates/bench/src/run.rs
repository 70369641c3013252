//! The four subcommands. Each writes into its own timestamped directory.

use std::fs;
use std::io::{self, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use hyperadapt::gradcheck::{op_cases, pipeline_reports, run_case, CaseReport};
use hyperadapt::trainer::{Model, StepMetrics, TrainConfig, TrainError};

use crate::config::{BenchConfig, ConfigError, ModeSpec};
use crate::report::{
    smoothed, steps_to_threshold, write_curves, write_metrics, CompareReport, FailedCell, Latency, Reached, RunReport,
};
use crate::task::TaskConfig;

/// Steps excluded from latency statistics.
pub const WARMUP_STEPS: u64 = 10;
pub const MIN_MEASURED_STEPS: u64 = 100;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_SEEDS: u64 = 20;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    /// Process exit code: 2 for configuration errors, 3 for a non-finite loss.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Train(TrainError::NonFinite { .. }) => 3,
            BenchError::Train(TrainError::Config(_)) => 2,
            _ => 1,
        }
    }
}

/// Fresh `<out>/<command>-<timestamp>` directory; a numeric suffix keeps
/// back-to-back runs apart.
pub fn run_dir(out: &Path, command: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    let base = out.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Writes the config text exactly as given, plus the resolved config.
fn echo_config(dir: &Path, text: &str, cfg: &BenchConfig) -> Result<(), BenchError> {
    fs::write(dir.join("config.json"), text)?;
    fs::write(dir.join("resolved_config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

/// Finished training run with its loss curve.
pub struct CellOutcome {
    pub report: RunReport,
    pub task_losses: Vec<f64>,
}

/// Trains one model and writes `metrics.csv`, `report.json`,
/// `prune_events.jsonl` and the checkpoints into `dir`.
pub fn train_cell(
    task_cfg: &TaskConfig,
    train: &TrainConfig,
    label: &str,
    bench: &BenchConfig,
    dir: &Path,
) -> Result<CellOutcome, BenchError> {
    fs::create_dir_all(dir)?;
    let task = task_cfg.build();
    let mut model = Model::new(train.clone(), task.network, task.frozen_layers())?;
    let mut sampler = task.sampler(train.batch_size);
    let mut metrics: Vec<StepMetrics> = Vec::with_capacity(train.total_steps as usize);
    let mut step_ms = Vec::with_capacity(train.total_steps as usize);
    for step in 0..train.total_steps {
        let batch = sampler(step);
        let started = Instant::now();
        let m = model.train_step(&batch, step)?;
        step_ms.push(started.elapsed().as_secs_f64() * 1e3);
        metrics.push(m);
    }

    let csv_path = dir.join("metrics.csv");
    write_metrics(BufWriter::new(fs::File::create(&csv_path)?), &metrics)?;
    let mut events = BufWriter::new(fs::File::create(dir.join("prune_events.jsonl"))?);
    for ev in model.prune_events() {
        writeln!(events, "{}", ev.to_json_line())?;
    }
    events.flush()?;
    model.adapters_checkpoint().write_to(BufWriter::new(fs::File::create(dir.join("adapters.kv"))?))
        .map_err(|e| io::Error::other(e.to_string()))?;
    if let Some(kv) = model.hyper_checkpoint() {
        kv.write_to(BufWriter::new(fs::File::create(dir.join("hypernet.kv"))?))
            .map_err(|e| io::Error::other(e.to_string()))?;
    }

    let losses: Vec<f64> = metrics.iter().map(|m| m.task_loss).collect();
    let window = bench.smoothing_window.min(losses.len()).max(1);
    let smooth = smoothed(&losses, window);
    let initial = smooth.first().copied().unwrap_or(f64::NAN);
    let threshold = bench.threshold.unwrap_or(bench.threshold_fraction * initial);
    let measured = step_ms.get(WARMUP_STEPS as usize..).unwrap_or(&[]);
    let report = RunReport {
        mode: label.to_string(),
        seed: train.seed,
        metrics_csv: csv_path.display().to_string(),
        steps: train.total_steps,
        initial_smoothed_loss: initial,
        final_smoothed_loss: smooth.last().copied().unwrap_or(f64::NAN),
        threshold,
        steps_to_threshold: Reached::from(steps_to_threshold(&losses, window, threshold)),
        latency: Latency::from_samples(measured),
        peak_param_bytes: metrics.iter().map(|m| m.peak_param_bytes).max().unwrap_or(0),
        prune_events: model.prune_events().len(),
        final_effective_rank: model.effective_rank(),
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(CellOutcome { report, task_losses: losses })
}

/// `run`: one training run of the config as written.
pub fn cmd_run(cfg: &BenchConfig, text: &str, out: &Path) -> Result<(PathBuf, RunReport), BenchError> {
    let dir = run_dir(out, "run")?;
    echo_config(&dir, text, cfg)?;
    let label = ModeSpec {
        mode: cfg.train.mode,
        backend: cfg.train.backend,
    }
    .to_string();
    log::info!("run {label} seed {} into {}", cfg.train.seed, dir.display());
    let cell = train_cell(&cfg.task, &cfg.train, &label, cfg, &dir)?;
    Ok((dir, cell.report))
}

/// Unique label per listed mode; a repeated entry gets a `#n` suffix.
fn mode_labels(modes: &[ModeSpec]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::with_capacity(modes.len());
    for spec in modes {
        let base = spec.to_string();
        let seen = labels.iter().filter(|l| l.split('#').next() == Some(&base)).count();
        labels.push(if seen == 0 { base } else { format!("{base}#{}", seen + 1) });
    }
    labels
}

/// `compare`: every mode × seed cell, a summary per mode, and all loss
/// curves side by side. Failing cells are recorded and skipped.
pub fn cmd_compare(cfg: &BenchConfig, text: &str, out: &Path, parallel: usize) -> Result<(PathBuf, CompareReport), BenchError> {
    if cfg.modes.len() < 2 {
        return Err(ConfigError::Field {
            path: "modes".into(),
            message: format!("compare needs at least 2 modes, got {}", cfg.modes.len()),
        }
        .into());
    }
    if cfg.seeds < 3 {
        return Err(ConfigError::Field {
            path: "seeds".into(),
            message: format!("compare needs at least 3 seeds, got {}", cfg.seeds),
        }
        .into());
    }
    let dir = run_dir(out, "compare")?;
    echo_config(&dir, text, cfg)?;
    let labels = mode_labels(&cfg.modes);
    let cells: Vec<(ModeSpec, &str, u64)> = cfg
        .modes
        .iter()
        .zip(&labels)
        .flat_map(|(&m, label)| (0..cfg.seeds).map(move |s| (m, label.as_str(), s)))
        .collect();
    let results: Mutex<Vec<Option<Result<CellOutcome, String>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(spec, label, seed)) = cells.get(i) else { break };
        let (task, train) = cfg.cell(spec, seed);
        let cell_dir = dir.join(label.replace([':', '#'], "-")).join(format!("seed{seed}"));
        log::info!("cell {label} seed {seed}");
        let outcome = train_cell(&task, &train, label, cfg, &cell_dir).map_err(|e| {
            log::warn!("cell {label} seed {seed} failed: {e}");
            e.to_string()
        });
        results.lock().expect("results lock")[i] = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1) {
            s.spawn(work);
        }
    });

    let mut runs = Vec::new();
    let mut failed = Vec::new();
    let mut curves = Vec::new();
    let results = results.into_inner().expect("results lock");
    for ((_, label, seed), outcome) in cells.iter().zip(results) {
        let column = format!("{label}/seed{seed}");
        match outcome.expect("every cell ran") {
            Ok(cell) => {
                curves.push((column, cell.task_losses));
                runs.push(cell.report);
            }
            Err(error) => {
                curves.push((column, Vec::new()));
                failed.push(FailedCell {
                    mode: label.to_string(),
                    seed: *seed,
                    error,
                });
            }
        }
    }
    write_curves(BufWriter::new(fs::File::create(dir.join("curves.csv"))?), &curves)?;
    let report = CompareReport::build(&labels, cfg.seeds, runs, failed);
    write_json(&dir.join("compare.json"), &report)?;
    fs::write(dir.join("summary.txt"), report.table())?;
    Ok((dir, report))
}

/// Latency and analytic memory of one mode.
#[derive(Debug, Clone, Serialize)]
pub struct MeasureRecord {
    pub mode: String,
    pub latency: Latency,
    pub coefficient_of_variation: f64,
    pub frozen_floats: usize,
    pub adapter_floats: usize,
    pub hypernet_floats: usize,
    pub moment_floats: usize,
    pub param_bytes: u64,
    /// Bytes above the first measured mode.
    pub param_bytes_delta: i64,
}

/// Times `steps` training steps of one config after the warm-up.
pub fn measure_one(task: &TaskConfig, train: &TrainConfig, label: &str, steps: u64) -> Result<MeasureRecord, BenchError> {
    let steps = steps.max(MIN_MEASURED_STEPS);
    let mut train = train.clone();
    train.total_steps = train.total_steps.max(WARMUP_STEPS + steps + 1);
    let task = task.build();
    let mut model = Model::new(train, task.network, task.frozen_layers())?;
    let mut sampler = task.sampler(model.config().batch_size);
    let mut ms = Vec::with_capacity(steps as usize);
    for step in 0..WARMUP_STEPS + steps {
        let batch = sampler(step);
        let started = Instant::now();
        model.train_step(&batch, step)?;
        if step >= WARMUP_STEPS {
            ms.push(started.elapsed().as_secs_f64() * 1e3);
        }
    }
    let counts = model.param_counts();
    Ok(MeasureRecord {
        mode: label.to_string(),
        latency: Latency::from_samples(&ms).expect("at least one measured step"),
        coefficient_of_variation: Latency::coefficient_of_variation(&ms),
        frozen_floats: counts.frozen,
        adapter_floats: counts.adapter_state,
        hypernet_floats: counts.hypernet,
        moment_floats: counts.optimizer_moments,
        param_bytes: counts.bytes(),
        param_bytes_delta: 0,
    })
}

/// `measure`: serial latency and memory records for every listed mode (the
/// training mode when none are listed).
pub fn cmd_measure(cfg: &BenchConfig, text: &str, out: &Path, steps: u64) -> Result<(PathBuf, Vec<MeasureRecord>), BenchError> {
    let dir = run_dir(out, "measure")?;
    echo_config(&dir, text, cfg)?;
    let specs = if cfg.modes.is_empty() {
        vec![ModeSpec {
            mode: cfg.train.mode,
            backend: cfg.train.backend,
        }]
    } else {
        cfg.modes.clone()
    };
    let mut records = Vec::new();
    for spec in specs {
        let train = spec.apply(&cfg.train);
        log::info!("measure {spec}");
        records.push(measure_one(&cfg.task, &train, &spec.to_string(), steps)?);
    }
    let base = records[0].param_bytes as i64;
    for r in &mut records {
        r.param_bytes_delta = r.param_bytes as i64 - base;
    }
    write_json(&dir.join("measure.json"), &records)?;
    Ok((dir, records))
}


#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub seeds: u64,
    pub cases: Vec<CaseReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:>12} {:>9} {}\n", "case", "max_rel_err", "entries", "status");
        for c in &self.cases {
            let status = if c.passed(self.tolerance) { "ok" } else { "FAIL" };
            s += &format!("{:<28} {:>12.3e} {:>9} {status}\n", c.name, c.max_rel_err, c.entries_checked);
        }
        s
    }
}

/// Finite-difference check of every op and every training pipeline.
pub fn gradcheck(seeds: u64) -> Result<GradcheckReport, BenchError> {
    let mut cases = Vec::new();
    for case in op_cases() {
        cases.push(run_case(&case, seeds, GRADCHECK_STEP).map_err(TrainError::from)?);
    }
    cases.extend(pipeline_reports(seeds, GRADCHECK_STEP)?);
    let passed = cases.iter().all(|c| c.passed(GRADCHECK_TOL));
    Ok(GradcheckReport {
        tolerance: GRADCHECK_TOL,
        step: GRADCHECK_STEP,
        seeds,
        cases,
        passed,
    })
}

pub fn cmd_gradcheck(out: &Path) -> Result<(PathBuf, GradcheckReport), BenchError> {
    let dir = run_dir(out, "gradcheck")?;
    let report = gradcheck(GRADCHECK_SEEDS)?;
    write_json(&dir.join("gradcheck.json"), &report)?;
    Ok((dir, report))
}
