//! Command-line front end: solve recorded measurements, generate synthetic
//! corpora and run corpus experiments.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rirsolve::experiment::Method;
use rirsolve::task::TaskKind;

use crate::commands::SolveInputs;
use crate::config::{Config, Overrides};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rirsolve", version, about = "Training-free room impulse response reconstruction")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Noise level in dB, used to derive σ_n when it is not given.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub snr_db: Option<f64>,
    /// Gaussian noise standard deviation of the observation.
    #[arg(long, global = true)]
    pub sigma_n: Option<f64>,
    /// Scale of the posterior perturbation, 0 for deterministic refinement.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Number of sampler steps T.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "rirsolve-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    /// Observed signal, mono WAV.
    #[arg(long)]
    pub input: PathBuf,
    /// Excitation signal; defaults to the configured sweep.
    #[arg(long)]
    pub excitation: Option<PathBuf>,
    /// Clean RIR; when given, error tables are written.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Laplacian noise scale b (robust deconvolution).
    #[arg(long)]
    pub laplace_b: Option<f64>,
    /// Clip threshold τ (declipping).
    #[arg(long)]
    pub clip_level: Option<f64>,
    /// Unobserved span `start:end` in seconds (inpainting); repeatable.
    #[arg(long = "gap", value_parser = parse_gap)]
    pub gaps: Vec<(f64, f64)>,
}

impl From<SolveArgs> for SolveInputs {
    fn from(a: SolveArgs) -> Self {
        SolveInputs {
            input: a.input,
            excitation: a.excitation,
            truth: a.truth,
            laplace_b: a.laplace_b,
            clip_level: a.clip_level,
            gaps: a.gaps,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remove additive noise from a measured RIR.
    Denoise(SolveArgs),
    /// Recover an RIR from a sweep recording with Gaussian noise.
    Deconv(SolveArgs),
    /// Deconvolution under Gaussian plus Laplacian noise.
    DeconvRobust(SolveArgs),
    /// Fill unobserved spans of an RIR.
    Inpaint(SolveArgs),
    /// Recover an RIR from a clipped sweep recording.
    Declip(SolveArgs),
    /// Run a baseline on a recorded measurement.
    Baseline {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Needed only where the method fits several tasks.
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[command(flatten)]
        solve: SolveArgs,
    },
    /// Write a synthetic corpus and its manifest.
    Synth {
        /// Also simulate an observation of each RIR for this task.
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long)]
        count: Option<usize>,
        /// Regenerate the corpus of an existing manifest and verify checksums.
        #[arg(long, conflicts_with_all = ["task", "count"])]
        manifest: Option<PathBuf>,
    },
    /// Run methods and baselines over a synthetic corpus.
    Experiment {
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: rirsolve::RirError| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: rirsolve::RirError| e.to_string())
}

fn parse_gap(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected start:end in seconds")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

/// The task a baseline solves when none is named.
fn baseline_task(method: Method) -> CliResult<TaskKind> {
    let fits: Vec<TaskKind> = TaskKind::ALL.into_iter().filter(|&k| method.applies_to(k)).collect();
    match fits.as_slice() {
        [k] => Ok(*k),
        _ => Err(CliError::Config(format!("method {method} fits several tasks; pass --task"))),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let loaded = Config::load(cli.common.config.as_deref())?;
    let mut cfg = loaded.config;
    let overrides = Overrides {
        seed: cli.common.seed,
        snr_db: cli.common.snr_db,
        sigma_n: cli.common.sigma_n,
        gamma: cli.common.gamma,
        steps: cli.common.steps,
    };
    cfg.apply(&overrides);
    let out = cli.common.out.as_path();
    let solve = |kind: TaskKind, method: Method, args: SolveArgs, cfg: &Config| {
        cfg.validate()?;
        commands::cmd_solve(kind, method, cfg, &args.into(), out)
    };
    match cli.command {
        Command::Denoise(a) => solve(TaskKind::Denoise, Method::Rirflow, a, &cfg),
        Command::Deconv(a) => solve(TaskKind::Deconv, Method::Rirflow, a, &cfg),
        Command::DeconvRobust(a) => solve(TaskKind::DeconvRobust, Method::Rirflow, a, &cfg),
        Command::Inpaint(a) => solve(TaskKind::Inpaint, Method::Rirflow, a, &cfg),
        Command::Declip(a) => solve(TaskKind::Declip, Method::Rirflow, a, &cfg),
        Command::Baseline { method, task, solve: a } => {
            let kind = match task {
                Some(k) => k,
                None => baseline_task(method)?,
            };
            if method == Method::Rirflow || !method.applies_to(kind) {
                return Err(CliError::Config(format!("{method} is not a baseline for {kind}")));
            }
            solve(kind, method, a, &cfg)
        }
        Command::Synth { task, count, manifest } => {
            if let Some(c) = count {
                cfg.corpus.count = c;
            }
            cfg.validate()?;
            let m = match manifest {
                Some(p) => commands::cmd_synth_from_manifest(&p, &cfg, out)?,
                None => commands::cmd_synth(&cfg, task, out)?,
            };
            eprintln!("wrote {} RIRs to {}", m.items.len(), out.display());
            Ok(())
        }
        Command::Experiment { task, count, workers } => {
            if let Some(k) = task {
                cfg.experiment.task = k;
            }
            if let Some(c) = count {
                cfg.corpus.count = c;
            }
            if let Some(w) = workers {
                cfg.experiment.workers = w;
            }
            cfg.validate()?;
            let summary = commands::cmd_experiment(&cfg, loaded.source.as_ref(), &overrides, out)?;
            for s in &summary {
                println!(
                    "{:<18} snr {:>5} dB  ST-NMSE {:>8.2} dB  per-band {:>8.2} dB  success {}/{}",
                    s.method.as_str(),
                    s.snr_db,
                    s.mean_st_nmse_db,
                    s.mean_band_st_nmse_db,
                    s.successes,
                    s.items
                );
            }
            Ok(())
        }
    }
}
