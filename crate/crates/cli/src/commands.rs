use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rirsolve::eval::{st_nmse, st_nmse_per_band, StNmseReport};
use rirsolve::experiment::{evaluate_item, run_method, score, summarize, ItemRow, Method, MethodSummary, Scores};
use rirsolve::flow_engine::{FlowTrace, StepRecord};
use rirsolve::forward_ops::{ClipSpec, ConvOperator, LinearOperator, MaskOperator};
use rirsolve::scenario::{corpus_entries, simulate, CorpusEntry, CorpusSpec, Measurement, MeasurementSetup};
use rirsolve::signal::{noise_sigma_from_snr, SnrMode};
use rirsolve::task::{MeasurementTask, TaskKind};
use rirsolve::SignalBuffer;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, read_wav, sha256_hex, write_atomic, write_json, write_wav};

/// Files and per-run parameters of a solve or baseline command.
#[derive(Debug, Clone, Default)]
pub struct SolveInputs {
    pub input: PathBuf,
    pub excitation: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub laplace_b: Option<f64>,
    pub clip_level: Option<f64>,
    pub gaps: Vec<(f64, f64)>,
}

fn check_rate(x: &SignalBuffer, path: &Path, cfg: &Config) -> CliResult<()> {
    if x.sample_rate() != cfg.sample_rate {
        return Err(CliError::Config(format!(
            "{} has sample rate {} Hz, configuration expects {} Hz",
            path.display(),
            x.sample_rate(),
            cfg.sample_rate
        )));
    }
    Ok(())
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Builds the inverse problem for a recorded observation. Noise levels not
/// given explicitly follow from the configured SNR, referenced the same way
/// the simulator references it.
pub fn build_measurement(kind: TaskKind, cfg: &Config, args: &SolveInputs) -> CliResult<Measurement> {
    let y = read_wav(&args.input)?;
    check_rate(&y, &args.input, cfg)?;
    let fs = y.sample_rate();
    let setup = cfg.measurement_for(kind);
    let given = cfg.solve.sigma_n;
    let level_sigma = |level: f64, snr: f64| -> CliResult<f64> {
        if level == 0.0 {
            return Err(CliError::Config("observation is silent; give --sigma-n".into()));
        }
        Ok(level * 10f64.powf(-snr / 20.0))
    };
    match kind {
        TaskKind::Denoise => {
            let sigma_n = match given {
                Some(s) => s,
                None => noise_sigma_from_snr(&y, setup.snr_db, SnrMode::Early50ms)?,
            };
            Ok(Measurement {
                task: MeasurementTask::Denoise { sigma_n },
                y,
                excitation: None,
            })
        }
        TaskKind::Inpaint => {
            let gaps = if args.gaps.is_empty() { &setup.gaps_s } else { &args.gaps };
            let mask = MaskOperator::with_gaps(y.len(), fs, gaps)?;
            let y = y.with_samples(mask.apply(y.samples()))?;
            let sigma_n = match given {
                Some(s) => s,
                None => noise_sigma_from_snr(&y, setup.snr_db, SnrMode::Early50ms)?,
            };
            Ok(Measurement {
                task: MeasurementTask::Inpaint { mask, sigma_n },
                y,
                excitation: None,
            })
        }
        TaskKind::Deconv | TaskKind::DeconvRobust | TaskKind::Declip => {
            let h = match &args.excitation {
                Some(p) => {
                    let h = read_wav(p)?;
                    check_rate(&h, p, cfg)?;
                    h
                }
                None => setup.excitation(fs)?,
            };
            if y.len() < h.len() {
                return Err(CliError::Config(format!(
                    "observation has {} samples, fewer than the {}-sample excitation",
                    y.len(),
                    h.len()
                )));
            }
            let op = ConvOperator::new(&h, y.len() + 1 - h.len())?;
            let level = rms(y.samples());
            let sigma_n = match given {
                Some(s) => s,
                None => level_sigma(level, setup.snr_db)?,
            };
            let task = match kind {
                TaskKind::Deconv => MeasurementTask::Deconv { op, sigma_n },
                TaskKind::DeconvRobust => {
                    let laplace_b = match args.laplace_b.or(cfg.solve.laplace_b) {
                        Some(b) => b,
                        None => level_sigma(level, setup.laplace_snr_db)? / std::f64::consts::SQRT_2,
                    };
                    MeasurementTask::DeconvRobust { op, sigma_n, laplace_b }
                }
                _ => {
                    let tau = match args.clip_level.or(cfg.solve.clip_level) {
                        Some(t) => t,
                        None => y.samples().iter().fold(0.0f64, |m, v| m.max(v.abs())),
                    };
                    let clip = ClipSpec::new(setup.clip_c, setup.clip_zeta, tau)?;
                    MeasurementTask::Declip { op, clip, sigma_n }
                }
            };
            Ok(Measurement {
                task,
                y,
                excitation: Some(h),
            })
        }
    }
}

#[derive(Debug, Serialize)]
struct NoiseReport {
    sigma_n: f64,
    laplace_b: Option<f64>,
    clip_tau: Option<f64>,
    observed_samples: Option<usize>,
}

impl NoiseReport {
    fn of(task: &MeasurementTask) -> Self {
        let mut r = NoiseReport {
            sigma_n: task.sigma_n(),
            laplace_b: None,
            clip_tau: None,
            observed_samples: None,
        };
        match task {
            MeasurementTask::DeconvRobust { laplace_b, .. } => r.laplace_b = Some(*laplace_b),
            MeasurementTask::Declip { clip, .. } => r.clip_tau = Some(clip.tau),
            MeasurementTask::Inpaint { mask, .. } => r.observed_samples = Some(mask.observed_count()),
            _ => {}
        }
        r
    }
}

#[derive(Debug, Serialize)]
struct TraceSummary {
    steps: usize,
    total_cg_iterations: usize,
    stalled_steps: usize,
    inexact_solves: usize,
    max_relative_residual: f64,
    records: Vec<StepRecord>,
}

impl TraceSummary {
    fn of(trace: &FlowTrace) -> Self {
        Self {
            steps: trace.records.len(),
            total_cg_iterations: trace.total_cg_iterations(),
            stalled_steps: trace.stalled_steps(),
            inexact_solves: trace.inexact_solves(),
            max_relative_residual: trace.records.iter().map(|r| r.max_relative_residual).fold(0.0, f64::max),
            records: trace.records.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    task: TaskKind,
    method: Method,
    input: String,
    input_sha256: String,
    sample_rate: u32,
    n_samples: usize,
    seed: u64,
    steps_t: Option<usize>,
    gamma: Option<f64>,
    noise: NoiseReport,
    success: bool,
    estimate: &'a str,
    estimate_sha256: String,
    trace: Option<TraceSummary>,
    scores: Option<Scores>,
}

/// Solves one recorded measurement with `method` and writes the estimate, a
/// JSON report and, given the clean RIR, a per-frame error table.
pub fn cmd_solve(kind: TaskKind, method: Method, cfg: &Config, args: &SolveInputs, out: &Path) -> CliResult<()> {
    let m = build_measurement(kind, cfg, args)?;
    let truth = match &args.truth {
        Some(p) => {
            let x = read_wav(p)?;
            check_rate(&x, p, cfg)?;
            let n = m.task.unknown_len(&m.y)?;
            if x.len() != n {
                return Err(CliError::Config(format!(
                    "{} has {} samples, the estimate will have {n}",
                    p.display(),
                    x.len()
                )));
            }
            Some(x)
        }
        None => None,
    };
    let result = run_method(method, &m, &cfg.flow, cfg.seed)?;
    ensure_dir(out)?;
    let estimate_sha256 = write_wav(&out.join("estimate.wav"), &result.estimate)?;
    let plan = cfg.flow.resolve_plan(cfg.sample_rate)?;
    let scores = match &truth {
        Some(x) => {
            let s = score(x, &result.estimate, &m, &plan)?;
            write_frame_csv(&out.join("st_nmse.csv"), x, &result.estimate, &plan)?;
            Some(s)
        }
        None => None,
    };
    let input_bytes = std::fs::read(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let is_flow = method == Method::Rirflow;
    let report = RunReport {
        task: kind,
        method,
        input: args.input.display().to_string(),
        input_sha256: sha256_hex(&input_bytes),
        sample_rate: cfg.sample_rate,
        n_samples: result.estimate.len(),
        seed: cfg.seed,
        steps_t: is_flow.then_some(cfg.flow.steps_t),
        gamma: is_flow.then_some(cfg.flow.gamma),
        noise: NoiseReport::of(&m.task),
        success: result.success,
        estimate: "estimate.wav",
        estimate_sha256,
        trace: result.trace.as_ref().map(TraceSummary::of),
        scores,
    };
    write_json(&out.join("report.json"), &report)
}

/// Per-frame ST-NMSE, full band and per band. Silent reference frames are
/// left empty.
fn write_frame_csv(path: &Path, x: &SignalBuffer, est: &SignalBuffer, plan: &rirsolve::filterbank::BandPlan) -> CliResult<()> {
    let full = st_nmse(x, est)?;
    let bands = st_nmse_per_band(x, est, plan)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame".to_string(), "start_s".into(), "full".into()];
    header.extend(plan.centers.iter().map(|c| format!("band_{c}")));
    w.write_record(&header).map_err(csv_err)?;
    let lookup = |r: &StNmseReport, w: usize| {
        r.frame_index
            .iter()
            .position(|&i| i == w)
            .map(|p| r.per_frame[p].to_string())
            .unwrap_or_default()
    };
    for f in 0..full.total_frames() {
        let mut row = vec![f.to_string(), format!("{}", f as f64 * full.hop_ms / 1000.0), lookup(&full, f)];
        row.extend(bands.iter().map(|b| lookup(b, f)));
        w.write_record(&row).map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| CliError::Io(e.to_string()))?)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(format!("writing CSV: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    #[serde(flatten)]
    pub entry: CorpusEntry,
    pub file: String,
    pub sha256: String,
    /// Simulated observation, when a task was requested.
    pub observation: Option<ManifestFile>,
    pub sigma_n: Option<f64>,
    pub laplace_b: Option<f64>,
    pub clip_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus: CorpusSpec,
    pub seed: u64,
    pub task: Option<TaskKind>,
    pub measurement: Option<MeasurementSetup>,
    pub excitation: Option<ManifestFile>,
    pub items: Vec<ManifestItem>,
}

/// Writes the clean corpus, optionally with simulated observations of `task`,
/// plus a manifest holding the ground truth and a checksum per file.
pub fn cmd_synth(cfg: &Config, task: Option<TaskKind>, out: &Path) -> CliResult<Manifest> {
    let entries = corpus_entries(&cfg.corpus)?;
    let setup = task.map(|k| cfg.measurement_for(k));
    ensure_dir(out)?;
    let mut items = Vec::with_capacity(entries.len());
    let mut excitation = None;
    for e in entries {
        let x = e.generate()?;
        let file = format!("{}.wav", e.id);
        let sha256 = write_wav(&out.join(&file), &x)?;
        let mut item = ManifestItem {
            entry: e.clone(),
            file,
            sha256,
            observation: None,
            sigma_n: None,
            laplace_b: None,
            clip_tau: None,
        };
        if let (Some(kind), Some(setup)) = (task, &setup) {
            let m = simulate(kind, &x, setup, &e.id, cfg.seed)?;
            let file = format!("{}.{}.wav", e.id, kind.as_str());
            let sha256 = write_wav(&out.join(&file), &m.y)?;
            item.observation = Some(ManifestFile { file, sha256 });
            let noise = NoiseReport::of(&m.task);
            item.sigma_n = Some(noise.sigma_n);
            item.laplace_b = noise.laplace_b;
            item.clip_tau = noise.clip_tau;
            if let (Some(h), None) = (&m.excitation, &excitation) {
                let file = "excitation.wav".to_string();
                let sha256 = write_wav(&out.join(&file), h)?;
                excitation = Some(ManifestFile { file, sha256 });
            }
        }
        items.push(item);
    }
    let manifest = Manifest {
        corpus: cfg.corpus.clone(),
        seed: cfg.seed,
        task,
        measurement: setup,
        excitation,
        items,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Regenerates the corpus described by a manifest into `out` and checks every
/// checksum.
pub fn cmd_synth_from_manifest(manifest_path: &Path, cfg: &Config, out: &Path) -> CliResult<Manifest> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| CliError::io(manifest_path, e))?;
    let old: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let cfg = Config {
        corpus: old.corpus.clone(),
        seed: old.seed,
        measurement: old.measurement.clone(),
        sample_rate: old.corpus.sample_rate,
        ..cfg.clone()
    };
    let new = cmd_synth(&cfg, old.task, out)?;
    if new != old {
        let bad: Vec<&str> = new
            .items
            .iter()
            .zip(&old.items)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.file.as_str())
            .collect();
        return Err(CliError::Io(format!("regenerated corpus differs from the manifest: {bad:?}")));
    }
    Ok(new)
}

#[derive(Debug, Serialize)]
struct ExperimentSummary<'a> {
    task: TaskKind,
    seed: u64,
    steps_t: usize,
    gamma: f64,
    corpus_items: usize,
    snr_db: &'a [f64],
    methods: &'a [Method],
    config_file: Option<String>,
    overrides: &'a crate::config::Overrides,
    summary: Vec<MethodSummary>,
}

const RESULT_HEADER: [&str; 12] = [
    "item",
    "rt_s",
    "snr_db",
    "method",
    "success",
    "st_nmse",
    "st_nmse_db",
    "band_st_nmse",
    "band_st_nmse_db",
    "masked_st_nmse",
    "observed_error_db",
    "error",
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn db(v: f64) -> f64 {
    10.0 * v.log10()
}

fn results_csv(rows: &[ItemRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULT_HEADER).map_err(csv_err)?;
    for r in rows {
        let s = r.scores;
        w.write_record([
            r.item.clone(),
            r.rt_s.to_string(),
            r.snr_db.to_string(),
            r.method.to_string(),
            r.success.to_string(),
            opt(s.map(|s| s.st_nmse)),
            opt(s.map(|s| db(s.st_nmse))),
            opt(s.map(|s| s.band_st_nmse)),
            opt(s.map(|s| db(s.band_st_nmse))),
            opt(s.and_then(|s| s.masked_st_nmse)),
            opt(s.and_then(|s| s.observed_error_db)),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn summary_csv(summary: &[MethodSummary]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "snr_db",
        "items",
        "successes",
        "scored",
        "mean_st_nmse",
        "mean_st_nmse_db",
        "mean_band_st_nmse",
        "mean_band_st_nmse_db",
        "mean_masked_st_nmse",
        "worst_observed_error_db",
    ])
    .map_err(csv_err)?;
    for s in summary {
        w.write_record([
            s.method.to_string(),
            s.snr_db.to_string(),
            s.items.to_string(),
            s.successes.to_string(),
            s.scored.to_string(),
            s.mean_st_nmse.to_string(),
            s.mean_st_nmse_db.to_string(),
            s.mean_band_st_nmse.to_string(),
            s.mean_band_st_nmse_db.to_string(),
            opt(s.mean_masked_st_nmse),
            opt(s.worst_observed_error_db),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let n = if requested == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        requested
    };
    n.clamp(1, jobs.max(1))
}

/// Runs every method on every corpus item at every SNR. Item failures become
/// rows with an error message; the run carries on.
pub fn cmd_experiment(
    cfg: &Config,
    source: Option<&(PathBuf, String)>,
    overrides: &crate::config::Overrides,
    out: &Path,
) -> CliResult<Vec<MethodSummary>> {
    let kind = cfg.experiment.task;
    let setup = cfg.measurement_for(kind);
    let snrs = if cfg.experiment.snr_db.is_empty() {
        vec![setup.snr_db]
    } else {
        cfg.experiment.snr_db.clone()
    };
    let methods = if cfg.experiment.methods.is_empty() {
        Method::defaults_for(kind)
    } else {
        cfg.experiment.methods.clone()
    };
    let entries = corpus_entries(&cfg.corpus)?;
    ensure_dir(&out.join("items"))?;
    let config_text = match source {
        Some((_, text)) => text.clone(),
        None => format!("# no --config given; defaults in effect\n{}", cfg.to_toml()?),
    };
    write_atomic(&out.join("config.toml"), config_text.as_bytes())?;

    let jobs: Vec<(usize, f64)> = (0..entries.len()).flat_map(|i| snrs.iter().map(move |&s| (i, s))).collect();
    let results: Mutex<Vec<Option<CliResult<Vec<ItemRow>>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..worker_count(cfg.experiment.workers, jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, snr)) = jobs.get(j) else { break };
                let rows = run_job(kind, &entries[i], &setup, snr, &methods, cfg, out);
                let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                eprintln!("[{finished}/{}] {} at {snr} dB", jobs.len(), entries[i].id);
                results.lock().expect("no worker panicked")[j] = Some(rows);
            });
        }
    });
    let mut rows = Vec::new();
    for r in results.into_inner().expect("no worker panicked") {
        rows.extend(r.expect("every job ran")?);
    }
    write_atomic(&out.join("results.csv"), &results_csv(&rows)?)?;
    let summary = summarize(&rows);
    write_atomic(&out.join("summary.csv"), &summary_csv(&summary)?)?;
    write_json(
        &out.join("summary.json"),
        &ExperimentSummary {
            task: kind,
            seed: cfg.seed,
            steps_t: cfg.flow.steps_t,
            gamma: cfg.flow.gamma,
            corpus_items: entries.len(),
            snr_db: &snrs,
            methods: &methods,
            config_file: source.map(|(p, _)| p.display().to_string()),
            overrides,
            summary: summary.clone(),
        },
    )?;
    Ok(summary)
}

fn run_job(
    kind: TaskKind,
    entry: &CorpusEntry,
    setup: &MeasurementSetup,
    snr: f64,
    methods: &[Method],
    cfg: &Config,
    out: &Path,
) -> CliResult<Vec<ItemRow>> {
    let failed = |msg: String| {
        methods
            .iter()
            .map(|&method| ItemRow {
                item: entry.id.clone(),
                rt_s: entry.rt_seconds[0],
                snr_db: snr,
                method,
                success: false,
                scores: None,
                error: Some(msg.clone()),
            })
            .collect::<Vec<_>>()
    };
    let rows = match entry
        .generate()
        .and_then(|x| evaluate_item(kind, entry, &x, setup, snr, methods, &cfg.flow, cfg.seed))
    {
        Ok(rows) => rows,
        Err(e @ rirsolve::RirError::Config(_)) => return Err(e.into()),
        Err(e) => failed(e.to_string()),
    };
    write_json(&out.join("items").join(format!("{}_snr{snr}.json", entry.id)), &rows)?;
    Ok(rows)
}
