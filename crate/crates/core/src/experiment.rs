//! Method dispatch, scoring and aggregation for corpus experiments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{mle_declip_gn, mle_huber_deconv, mle_l2_deconv, trunc_shape};
use crate::error::{Result, RirError};
use crate::eval::{mean_band_avg, observed_error_db, st_nmse, st_nmse_masked, st_nmse_per_band};
use crate::filterbank::BandPlan;
use crate::flow_engine::{run, FlowConfig, FlowTrace};
use crate::scenario::{simulate, stream_id, CorpusEntry, Measurement, MeasurementSetup};
use crate::signal::SignalBuffer;
use crate::task::{MeasurementTask, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rirflow,
    /// The observation itself (denoising).
    Noisy,
    TruncShape,
    L2,
    L2TruncShape,
    Huber,
    HuberTruncShape,
    /// The observation with zeros in the gaps (inpainting).
    ZeroFill,
    L2Declip,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Rirflow,
        Method::Noisy,
        Method::TruncShape,
        Method::L2,
        Method::L2TruncShape,
        Method::Huber,
        Method::HuberTruncShape,
        Method::ZeroFill,
        Method::L2Declip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rirflow => "rirflow",
            Method::Noisy => "noisy",
            Method::TruncShape => "trunc-shape",
            Method::L2 => "l2",
            Method::L2TruncShape => "l2-trunc-shape",
            Method::Huber => "huber",
            Method::HuberTruncShape => "huber-trunc-shape",
            Method::ZeroFill => "zero-fill",
            Method::L2Declip => "l2-declip",
        }
    }

    pub fn applies_to(self, kind: TaskKind) -> bool {
        use TaskKind::*;
        match self {
            Method::Rirflow => true,
            Method::Noisy | Method::TruncShape => kind == Denoise,
            Method::L2 => matches!(kind, Deconv | DeconvRobust),
            Method::L2TruncShape => kind == Deconv,
            Method::Huber | Method::HuberTruncShape => kind == DeconvRobust,
            Method::ZeroFill => kind == Inpaint,
            Method::L2Declip => kind == Declip,
        }
    }

    /// The method and the baselines it is compared against for `kind`.
    pub fn defaults_for(kind: TaskKind) -> Vec<Method> {
        Method::ALL.into_iter().filter(|m| m.applies_to(kind)).collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = RirError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RirError::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub estimate: SignalBuffer,
    /// False when a baseline reports that it could not do its job, e.g. a
    /// band without a Lundeby estimate.
    pub success: bool,
    pub trace: Option<FlowTrace>,
}

impl MethodOutput {
    fn plain(estimate: SignalBuffer) -> Self {
        Self {
            estimate,
            success: true,
            trace: None,
        }
    }
}

fn excitation(m: &Measurement) -> Result<&SignalBuffer> {
    m.excitation
        .as_ref()
        .ok_or_else(|| RirError::Config("this method needs the excitation signal".into()))
}

/// Runs one method on one measurement. `seed` drives every random draw.
pub fn run_method(method: Method, m: &Measurement, cfg: &FlowConfig, seed: u64) -> Result<MethodOutput> {
    let kind = m.task.kind();
    if !method.applies_to(kind) {
        return Err(RirError::Config(format!("method {method} does not apply to {kind}")));
    }
    let plan = || cfg.resolve_plan(m.y.sample_rate());
    let tol = &cfg.tolerances;
    let truncated = |x: &SignalBuffer| -> Result<MethodOutput> {
        let ts = trunc_shape(x, &plan()?, seed)?;
        Ok(MethodOutput {
            estimate: ts.output,
            success: ts.success,
            trace: None,
        })
    };
    match (method, &m.task) {
        (Method::Rirflow, task) => {
            let cfg = FlowConfig {
                seed,
                ..cfg.clone()
            };
            let (estimate, trace) = run(task, &m.y, &cfg)?;
            Ok(MethodOutput {
                estimate,
                success: true,
                trace: Some(trace),
            })
        }
        (Method::Noisy | Method::ZeroFill, _) => Ok(MethodOutput::plain(m.y.clone())),
        (Method::TruncShape, _) => truncated(&m.y),
        (Method::L2 | Method::L2TruncShape, task) => {
            let l2 = mle_l2_deconv(&m.y, excitation(m)?, task.sigma_n(), tol)?;
            if method == Method::L2 {
                Ok(MethodOutput::plain(l2))
            } else {
                truncated(&l2)
            }
        }
        (Method::Huber | Method::HuberTruncShape, MeasurementTask::DeconvRobust { sigma_n, laplace_b, .. }) => {
            let (hub, _) = mle_huber_deconv(&m.y, excitation(m)?, *sigma_n, *laplace_b, tol)?;
            if method == Method::Huber {
                Ok(MethodOutput::plain(hub))
            } else {
                truncated(&hub)
            }
        }
        (Method::L2Declip, MeasurementTask::Declip { clip, sigma_n, .. }) => {
            let (est, _) = mle_declip_gn(&m.y, excitation(m)?, clip, *sigma_n, tol)?;
            Ok(MethodOutput::plain(est))
        }
        _ => unreachable!("applies_to admitted {method} for {kind}"),
    }
}

/// Error measures of one estimate against the clean RIR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Full-band ST-NMSE averaged over frames (linear).
    pub st_nmse: f64,
    /// Mean over bands of the per-band ST-NMSE averages (linear).
    pub band_st_nmse: f64,
    /// Inpainting only: ST-NMSE over frames touching a gap.
    pub masked_st_nmse: Option<f64>,
    /// Inpainting only: mismatch on the observed samples, in dB.
    pub observed_error_db: Option<f64>,
}

pub fn score(x: &SignalBuffer, estimate: &SignalBuffer, m: &Measurement, plan: &BandPlan) -> Result<Scores> {
    let (masked, observed) = match &m.task {
        MeasurementTask::Inpaint { mask, .. } => (
            Some(st_nmse_masked(x, estimate, mask)?.avg),
            Some(observed_error_db(&m.y, estimate, mask)?),
        ),
        _ => (None, None),
    };
    Ok(Scores {
        st_nmse: st_nmse(x, estimate)?.avg,
        band_st_nmse: mean_band_avg(&st_nmse_per_band(x, estimate, plan)?),
        masked_st_nmse: masked,
        observed_error_db: observed,
    })
}

/// One CSV row: one method on one item at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub item: String,
    pub rt_s: f64,
    pub snr_db: f64,
    pub method: Method,
    pub success: bool,
    pub scores: Option<Scores>,
    pub error: Option<String>,
}

/// Seed for one method on one item; items never share a stream.
pub fn item_seed(item_id: &str, kind: TaskKind, seed: u64) -> u64 {
    stream_id(&[item_id, kind.as_str(), "method", &seed.to_string()])
}

/// Simulates the measurement of one corpus item at `snr_db` and scores every
/// method on it. A method that fails becomes a failed row, not an error.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_item(
    kind: TaskKind,
    entry: &CorpusEntry,
    x: &SignalBuffer,
    setup: &MeasurementSetup,
    snr_db: f64,
    methods: &[Method],
    cfg: &FlowConfig,
    seed: u64,
) -> Result<Vec<ItemRow>> {
    let setup = MeasurementSetup {
        snr_db,
        laplace_snr_db: snr_db,
        ..setup.clone()
    };
    let m = simulate(kind, x, &setup, &entry.id, seed)?;
    let plan = cfg.resolve_plan(x.sample_rate())?;
    let method_seed = item_seed(&entry.id, kind, seed);
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let outcome = run_method(method, &m, cfg, method_seed)
            .and_then(|out| Ok((out.success, score(x, &out.estimate, &m, &plan)?)));
        let (success, scores, error) = match outcome {
            Ok((ok, s)) => (ok, Some(s), None),
            Err(e @ RirError::Config(_)) => return Err(e),
            Err(e) => (false, None, Some(e.to_string())),
        };
        rows.push(ItemRow {
            item: entry.id.clone(),
            rt_s: entry.rt_seconds[0],
            snr_db,
            method,
            success,
            scores,
            error,
        });
    }
    Ok(rows)
}

/// Aggregate over the items of one method at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub snr_db: f64,
    pub items: usize,
    pub successes: usize,
    /// Items that produced an estimate at all.
    pub scored: usize,
    pub mean_st_nmse: f64,
    pub mean_st_nmse_db: f64,
    pub mean_band_st_nmse: f64,
    pub mean_band_st_nmse_db: f64,
    pub mean_masked_st_nmse: Option<f64>,
    pub worst_observed_error_db: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Groups rows by (method, SNR) in order of first appearance. Means are over
/// scored items, in linear units before conversion to dB.
pub fn summarize(rows: &[ItemRow]) -> Vec<MethodSummary> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(m, s)| m == r.method && s == r.snr_db) {
            keys.push((r.method, r.snr_db));
        }
    }
    keys.into_iter()
        .map(|(method, snr_db)| {
            let group: Vec<&ItemRow> = rows.iter().filter(|r| r.method == method && r.snr_db == snr_db).collect();
            let scores: Vec<Scores> = group.iter().filter_map(|r| r.scores).collect();
            let full = mean(&scores.iter().map(|s| s.st_nmse).collect::<Vec<_>>());
            let band = mean(&scores.iter().map(|s| s.band_st_nmse).collect::<Vec<_>>());
            let masked: Vec<f64> = scores.iter().filter_map(|s| s.masked_st_nmse).collect();
            let observed = scores.iter().filter_map(|s| s.observed_error_db).reduce(f64::max);
            MethodSummary {
                method,
                snr_db,
                items: group.len(),
                successes: group.iter().filter(|r| r.success).count(),
                scored: scores.len(),
                mean_st_nmse: full,
                mean_st_nmse_db: 10.0 * full.log10(),
                mean_band_st_nmse: band,
                mean_band_st_nmse_db: 10.0 * band.log10(),
                mean_masked_st_nmse: (!masked.is_empty()).then(|| mean(&masked)),
                worst_observed_error_db: observed,
            }
        })
        .collect()
}
