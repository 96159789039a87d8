//! Short-time NMSE and EDC curves in dB.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RirError};
use crate::filterbank::{BandPlan, Filterbank};
use crate::forward_ops::MaskOperator;
use crate::signal::{schroeder_edc, SignalBuffer};

pub const DEFAULT_FRAME_MS: f64 = 20.0;
pub const DEFAULT_HOP_MS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StNmseReport {
    /// One ratio per frame with non-zero reference energy.
    pub per_frame: Vec<f64>,
    /// Frame index of each entry in `per_frame`.
    pub frame_index: Vec<usize>,
    /// Frames skipped because the reference was silent.
    pub skipped: Vec<usize>,
    pub avg: f64,
    pub frame_ms: f64,
    pub hop_ms: f64,
}

impl StNmseReport {
    pub fn total_frames(&self) -> usize {
        self.per_frame.len() + self.skipped.len()
    }

    pub fn avg_db(&self) -> f64 {
        10.0 * self.avg.log10()
    }
}

fn frame_len(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// ST-NMSE with 20 ms rectangular frames and a 10 ms hop.
pub fn st_nmse(x_true: &SignalBuffer, x_est: &SignalBuffer) -> Result<StNmseReport> {
    st_nmse_with(x_true, x_est, DEFAULT_FRAME_MS, DEFAULT_HOP_MS)
}

pub fn st_nmse_with(
    x_true: &SignalBuffer,
    x_est: &SignalBuffer,
    frame_ms: f64,
    hop_ms: f64,
) -> Result<StNmseReport> {
    check_len(x_true.len(), x_est.len())?;
    if x_true.sample_rate() != x_est.sample_rate() {
        return Err(RirError::invalid("signals have different sample rates"));
    }
    frames_nmse(
        x_true.samples(),
        x_est.samples(),
        frame_len(frame_ms, x_true.sample_rate()),
        frame_len(hop_ms, x_true.sample_rate()),
        frame_ms,
        hop_ms,
    )
}

fn frames_nmse(
    x: &[f64],
    e: &[f64],
    frame: usize,
    hop: usize,
    frame_ms: f64,
    hop_ms: f64,
) -> Result<StNmseReport> {
    if frame == 0 || hop == 0 {
        return Err(RirError::invalid("frame and hop must span at least one sample"));
    }
    if x.len() < frame {
        return Err(RirError::invalid(format!(
            "signal of {} samples is shorter than one {frame}-sample frame",
            x.len()
        )));
    }
    let count = (x.len() - frame) / hop + 1;
    let mut per_frame = Vec::with_capacity(count);
    let mut frame_index = Vec::with_capacity(count);
    let mut skipped = Vec::new();
    for w in 0..count {
        let s = w * hop;
        let (xw, ew) = (&x[s..s + frame], &e[s..s + frame]);
        let den: f64 = xw.iter().map(|v| v * v).sum();
        if den == 0.0 {
            skipped.push(w);
            continue;
        }
        let num: f64 = xw.iter().zip(ew).map(|(a, b)| (a - b) * (a - b)).sum();
        per_frame.push(num / den);
        frame_index.push(w);
    }
    if per_frame.is_empty() {
        return Err(RirError::invalid("reference is silent in every frame"));
    }
    let avg = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(StNmseReport {
        per_frame,
        frame_index,
        skipped,
        avg,
        frame_ms,
        hop_ms,
    })
}

/// ST-NMSE per band after splitting both signals with the same filterbank.
pub fn st_nmse_per_band(
    x_true: &SignalBuffer,
    x_est: &SignalBuffer,
    plan: &BandPlan,
) -> Result<Vec<StNmseReport>> {
    check_len(x_true.len(), x_est.len())?;
    let fs = x_true.sample_rate();
    if fs != x_est.sample_rate() {
        return Err(RirError::invalid("signals have different sample rates"));
    }
    let fb = Filterbank::new(plan, x_true.len(), fs)?;
    let bt = fb.split(x_true.samples())?;
    let be = fb.split(x_est.samples())?;
    let (frame, hop) = (frame_len(DEFAULT_FRAME_MS, fs), frame_len(DEFAULT_HOP_MS, fs));
    bt.iter()
        .zip(&be)
        .map(|(a, b)| frames_nmse(a, b, frame, hop, DEFAULT_FRAME_MS, DEFAULT_HOP_MS))
        .collect()
}

/// Mean of the per-band averages.
pub fn mean_band_avg(reports: &[StNmseReport]) -> f64 {
    reports.iter().map(|r| r.avg).sum::<f64>() / reports.len().max(1) as f64
}

/// ST-NMSE over the frames that contain at least one unobserved sample.
pub fn st_nmse_masked(
    x_true: &SignalBuffer,
    x_est: &SignalBuffer,
    mask: &MaskOperator,
) -> Result<StNmseReport> {
    check_len(x_true.len(), mask.keep.len())?;
    let mut r = st_nmse(x_true, x_est)?;
    let fs = x_true.sample_rate();
    let (frame, hop) = (frame_len(r.frame_ms, fs), frame_len(r.hop_ms, fs));
    let hits_gap = |w: usize| mask.keep[w * hop..w * hop + frame].iter().any(|&k| !k);
    let (per_frame, frame_index): (Vec<f64>, Vec<usize>) = r
        .per_frame
        .iter()
        .zip(&r.frame_index)
        .filter(|(_, &w)| hits_gap(w))
        .map(|(&v, &w)| (v, w))
        .unzip();
    if per_frame.is_empty() {
        return Err(RirError::invalid("no non-silent frame overlaps a gap"));
    }
    r.skipped.retain(|&w| hits_gap(w));
    r.avg = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    r.per_frame = per_frame;
    r.frame_index = frame_index;
    Ok(r)
}

/// `‖M(x̂ − y)‖² / ‖My‖²` in dB: how far the estimate strays from the
/// observed samples.
pub fn observed_error_db(y: &SignalBuffer, x_est: &SignalBuffer, mask: &MaskOperator) -> Result<f64> {
    check_len(y.len(), x_est.len())?;
    check_len(y.len(), mask.keep.len())?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((a, b), &k) in y.samples().iter().zip(x_est.samples()).zip(&mask.keep) {
        if k {
            num += (a - b) * (a - b);
            den += a * a;
        }
    }
    if den == 0.0 {
        return Err(RirError::invalid("observed samples carry no energy"));
    }
    Ok(10.0 * (num / den).log10())
}

/// Normalized EDC in dB, clamped below at `floor_db`.
pub fn edc_db(x: &SignalBuffer, floor_db: f64) -> Result<Vec<f64>> {
    let edc = schroeder_edc(x);
    let e0 = edc.values[0];
    if e0 == 0.0 {
        return Err(RirError::invalid("EDC of a silent signal is undefined"));
    }
    Ok(edc
        .values
        .iter()
        .map(|&v| {
            if v > 0.0 {
                (10.0 * (v / e0).log10()).max(floor_db)
            } else {
                floor_db
            }
        })
        .collect())
}
