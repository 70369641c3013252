use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyperadapt_bench::config::{BenchConfig, ConfigError, ModeSpec};
use hyperadapt_bench::run::{cmd_compare, cmd_gradcheck, cmd_measure, cmd_run, BenchError, MIN_MEASURED_STEPS};

/// Low-rank adapter benchmarks on synthetic tasks.
#[derive(Parser)]
#[command(name = "hyperadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its metrics, report and checkpoints.
    Run(Common),
    /// Train every mode × seed cell and compare steps to threshold.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Worker threads for independent cells.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Finite-difference check of every op and pipeline.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step latency and parameter memory of each mode.
    Measure {
        #[command(flatten)]
        common: Common,
        /// Timed steps after the warm-up.
        #[arg(long, default_value_t = MIN_MEASURED_STEPS)]
        steps: u64,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; the default regression benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (HYPERADAPT_OUT takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<u64>,
    /// Comma-separated modes, e.g. `adalora,hyper:mlp`.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Absolute task-loss threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

fn out_root(flag: Option<&Path>) -> PathBuf {
    std::env::var_os("HYPERADAPT_OUT")
        .map(PathBuf::from)
        .or_else(|| flag.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load(common: &Common) -> Result<(BenchConfig, String), BenchError> {
    let (mut cfg, text) = match &common.config {
        Some(path) => BenchConfig::load(path)?,
        None => {
            let cfg = BenchConfig::default_regression();
            let text = serde_json::to_string_pretty(&cfg)?;
            (cfg, text)
        }
    };
    if let Some(s) = common.seeds {
        cfg.seeds = s;
    }
    if let Some(t) = common.threshold {
        cfg.threshold = Some(t);
    }
    if let Some(list) = &common.modes {
        cfg.modes = list
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.trim().parse::<ModeSpec>().map_err(|message| ConfigError::Field {
                    path: format!("--modes[{i}]"),
                    message,
                })
            })
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn execute(cli: Cli) -> Result<ExitCode, BenchError> {
    match cli.command {
        Command::Run(common) => {
            let (mut cfg, text) = load(&common)?;
            if common.modes.is_some() {
                let [spec] = cfg.modes[..] else {
                    return Err(ConfigError::Field {
                        path: "--modes".into(),
                        message: format!("run takes exactly one mode, got {}", cfg.modes.len()),
                    }
                    .into());
                };
                cfg.train = spec.apply(&cfg.train);
            }
            let (dir, report) = cmd_run(&cfg, &text, &out_root(common.out.as_deref()))?;
            println!("{}", dir.display());
            println!(
                "{} seed {}: steps_to_threshold {} (threshold {:.4e}, final smoothed loss {:.4e})",
                report.mode, report.seed, report.steps_to_threshold, report.threshold, report.final_smoothed_loss
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { common, parallel } => {
            let (cfg, text) = load(&common)?;
            let (dir, report) = cmd_compare(&cfg, &text, &out_root(common.out.as_deref()), parallel)?;
            println!("{}", dir.display());
            print!("{}", report.table());
            if report.failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &report.failed {
                    eprintln!("failed: {} seed {}: {}", f.mode, f.seed, f.error);
                }
                Ok(ExitCode::from(4))
            }
        }
        Command::Gradcheck { out } => {
            let (dir, report) = cmd_gradcheck(&out_root(out.as_deref()))?;
            println!("{}", dir.display());
            print!("{}", report.table());
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Measure { common, steps } => {
            let (cfg, text) = load(&common)?;
            let (dir, records) = cmd_measure(&cfg, &text, &out_root(common.out.as_deref()), steps)?;
            println!("{}", dir.display());
            println!("{:<24} {:>10} {:>10} {:>8} {:>12} {:>12}", "mode", "mean_ms", "p95_ms", "cv", "param_bytes", "delta");
            for r in records {
                println!(
                    "{:<24} {:>10.3} {:>10.3} {:>8.3} {:>12} {:>12}",
                    r.mode, r.latency.mean_ms, r.latency.p95_ms, r.coefficient_of_variation, r.param_bytes, r.param_bytes_delta
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
