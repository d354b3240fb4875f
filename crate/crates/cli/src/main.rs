use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::info;

use pushrl::commbench::{measured_plateau_onset, parse_commbench, run_commbench};
use pushrl::config::{parse_config, RunConfig};
use pushrl::runtime::{run_training_with, RunOptions, RunReport, RuntimeError, StopReason};
use pushrl::strategy::{plan_with, profile, ThroughputProfile};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(name = "pushrl", version, about = "Decoupled actor/learner RL training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config until the target, budget or time limit.
    Train {
        config: PathBuf,
        /// Write the run report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write one JSON metrics record per line.
        #[arg(long, env = "PUSHRL_METRICS_PATH")]
        metrics: Option<PathBuf>,
        /// Overrides both the environment and model seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the communication benchmark described by a commbench config.
    Commbench {
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Solve for an actor/learner allocation and emit a config with it.
    Plan {
        /// Profile the base config on this machine first.
        #[arg(long, conflicts_with = "profile")]
        measure: bool,
        /// Profile file written by `profile`.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        cores: usize,
        /// Pin the learner count instead of searching over it.
        #[arg(long)]
        learners: Option<usize>,
        /// Base run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seconds spent profiling with --measure.
        #[arg(long, default_value_t = 6.0)]
        duration: f64,
    },
    /// Measure single-worker throughputs for a run config.
    Profile {
        config: PathBuf,
        #[arg(long, default_value_t = 6.0)]
        duration: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        error: error.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PUSHRL_LOG", "info"))
        .format_timestamp_millis()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            report,
            metrics,
            seed,
        } => cmd_train(&config, report.as_deref(), metrics.as_deref(), seed),
        Command::Commbench { config, report } => cmd_commbench(&config, report.as_deref()),
        Command::Plan {
            measure,
            profile,
            cores,
            learners,
            config,
            out,
            duration,
        } => cmd_plan(
            measure,
            profile.as_deref(),
            (cores, learners),
            config.as_deref(),
            out.as_deref(),
            duration,
        ),
        Command::Profile { config, duration, out } => cmd_profile(&config, duration, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())).map_err(runtime),
        None => io::stdout().write_all(text.as_bytes()).map_err(runtime),
    }
}

fn write_report(path: &Path, report: &RunReport) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(report).map_err(runtime)?;
    write_output(Some(path), &json)
}

fn cmd_train(
    config: &Path,
    report_path: Option<&Path>,
    metrics_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<u8, Failure> {
    let mut cfg = parse_config(config).map_err(usage)?;
    if let Some(s) = seed {
        cfg.environment.seed = s;
        cfg.model.seed = s;
    }
    let mut metrics = match metrics_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display())).map_err(usage)?,
        )),
        None => None,
    };
    info!(
        "training {} in {:?} mode with {} actor(s), {} learner(s), {} group(s)",
        cfg.environment.name,
        cfg.distribution.mode,
        cfg.distribution.n_actors,
        cfg.distribution.n_learners,
        cfg.distribution.n_groups
    );
    let opts = RunOptions {
        metrics: metrics.as_mut().map(|w| w as &mut dyn Write),
    };
    let outcome = run_training_with(&cfg, opts);
    if let Some(mut w) = metrics {
        w.flush().map_err(runtime)?;
    }
    let report = match outcome {
        Ok(r) => r,
        Err(RuntimeError::WorkerFailed { message, partial }) => {
            if let Some(p) = report_path {
                write_report(p, &partial)?;
            }
            return Err(runtime(anyhow!("worker failed: {message}")));
        }
        Err(e @ RuntimeError::Config(_)) => return Err(usage(e)),
        Err(e) => return Err(runtime(e)),
    };
    if let Some(p) = report_path {
        write_report(p, &report)?;
    }
    println!(
        "stop={} final_time={} steps={} updates={} episodes={} window_mean={}",
        serde_json::to_string(&report.stop_reason).map_err(runtime)?.trim_matches('"'),
        report.final_time.map_or("none".into(), |t| format!("{t:.3}")),
        report.total_steps,
        report.total_updates,
        report.episodes.len(),
        report.final_window_mean.map_or("none".into(), |m| format!("{m:.2}")),
    );
    Ok(match report.stop_reason {
        StopReason::TargetReached => 0,
        StopReason::BudgetExhausted | StopReason::WallTimeLimit => EXIT_BUDGET,
        StopReason::WorkerFailed => EXIT_RUNTIME,
    })
}

fn cmd_commbench(config: &Path, report_path: Option<&Path>) -> Result<u8, Failure> {
    let cfg = parse_commbench(config).map_err(usage)?;
    info!(
        "commbench: {} B messages, sample time {} s, {:?} transport",
        cfg.message_size, cfg.sample_time, cfg.transport
    );
    let (cal, reports) = run_commbench(&cfg).map_err(runtime)?;
    println!(
        "calibration t_sp={:.3e} t_sd={:.3e} t_rv={:.3e} predicted_onset={}",
        cal.t_sp,
        cal.t_sd,
        cal.t_rv,
        cal.onset().map_err(runtime)?
    );
    println!("n_actors collection_s predicted_s bound recv_msgs_per_s recv_MB_per_s");
    for r in &reports {
        println!(
            "{:>8} {:>12.3} {:>11.3} {:<8} {:>15.1} {:>13.1}",
            r.n_actors,
            r.collection_time,
            r.predicted_time.unwrap_or(f64::NAN),
            r.predicted_bound.map_or("-".to_string(), |b| b.to_string()),
            r.receive_throughput,
            r.bytes_per_sec / 1e6,
        );
    }
    if reports.len() > 1 {
        if let Some(n) = measured_plateau_onset(&reports, 0.1) {
            println!("measured_onset={n}");
        }
    }
    if let Some(p) = report_path {
        let json = serde_json::json!({ "calibration": cal, "runs": reports });
        write_output(Some(p), &serde_json::to_string_pretty(&json).map_err(runtime)?)?;
    }
    Ok(0)
}

fn duration_arg(secs: f64) -> Result<Duration, Failure> {
    Duration::try_from_secs_f64(secs)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| usage(anyhow!("--duration must be a positive number of seconds")))
}

fn cmd_profile(config: &Path, duration: f64, out: Option<&Path>) -> Result<u8, Failure> {
    let cfg = parse_config(config).map_err(usage)?;
    let d = duration_arg(duration)?;
    info!("profiling for {:.1} s", d.as_secs_f64());
    let p = profile(&cfg, d).map_err(runtime)?;
    write_output(out, &toml::to_string(&p).map_err(runtime)?)?;
    Ok(0)
}

fn cmd_plan(
    measure: bool,
    profile_path: Option<&Path>,
    (cores, learners): (usize, Option<usize>),
    config: Option<&Path>,
    out: Option<&Path>,
    duration: f64,
) -> Result<u8, Failure> {
    let mut cfg = match config {
        Some(p) => parse_config(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    let prof: ThroughputProfile = match (measure, profile_path) {
        (true, _) => profile(&cfg, duration_arg(duration)?).map_err(runtime)?,
        (false, Some(p)) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(usage)?;
            toml::from_str(&text)
                .with_context(|| format!("parsing profile {}", p.display()))
                .map_err(usage)?
        }
        (false, None) => return Err(usage(anyhow!("plan needs --measure or --profile <file>"))),
    };
    let hp = cfg.training.hyper_params();
    let chosen = plan_with(&prof, cores, &hp, learners).map_err(usage)?;
    info!(
        "plan: {} learner(s) on {} core(s), {} actor(s) on {} core(s); predicted TR_A={:.1} TR_L={:.1}; bottleneck: {}",
        chosen.n_learners,
        chosen.m_l,
        chosen.n_actors,
        chosen.m_a,
        chosen.predicted_tr_a,
        chosen.predicted_tr_l,
        chosen.bottleneck()
    );
    cfg.apply_plan(&chosen, cores);
    cfg.validate().map_err(usage)?;
    write_output(out, &cfg.to_toml())?;
    Ok(0)
}
