//! Synthetic corpora and simulated measurements for every task.
//!
//! Every random draw comes from a stream whose id is a hash of the item id,
//! the task and a purpose label, so items never share noise.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RirError};
use crate::filterbank::BandPlan;
use crate::forward_ops::{hard_clip, ClipSpec, ConvOperator, LinearOperator, MaskOperator, SweepSpec};
use crate::rng::NoiseStream;
use crate::signal::{noise_sigma_from_snr, rt_to_lambda, synth_rir, RtSpec, SignalBuffer, SnrMode};
use crate::task::{MeasurementTask, TaskKind};

/// Stable 64-bit stream id from a list of labels.
pub fn stream_id(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub const DEFAULT_FLOOR_DB: f64 = -80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub count: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// RTs are spread log-uniformly over this range.
    pub rt_min: f64,
    pub rt_max: f64,
    pub alpha: f64,
    /// Per-band RT multipliers for the default octave plan; empty means one
    /// broadband RT.
    pub band_rt_factors: Vec<f64>,
    /// White recording floor added to each clean RIR, in dB relative to its
    /// first 50 ms. Without it a short RT decays to values no measurement has.
    pub floor_db: Option<f64>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 30,
            duration_s: 1.5,
            sample_rate: 8000,
            rt_min: 0.2,
            rt_max: 2.3,
            alpha: 1.0,
            band_rt_factors: Vec::new(),
            floor_db: Some(DEFAULT_FLOOR_DB),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(RirError::config("corpus count must be at least 1"));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return Err(RirError::config("corpus duration and sample rate must be positive"));
        }
        if !(self.rt_min > 0.0 && self.rt_max >= self.rt_min) {
            return Err(RirError::config("need 0 < rt_min <= rt_max"));
        }
        if !(self.alpha > 0.0) {
            return Err(RirError::config("alpha must be positive"));
        }
        if self.floor_db.is_some_and(|f| !(f < 0.0)) {
            return Err(RirError::config("floor_db must be negative"));
        }
        if self.band_rt_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(RirError::config("band RT factors must be positive"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    /// Broadband RT of item `i`: the log-spaced grid point, so a corpus spans
    /// the whole range deterministically.
    pub fn rt_of(&self, i: usize) -> f64 {
        if self.count == 1 {
            return (self.rt_min * self.rt_max).sqrt();
        }
        let u = i as f64 / (self.count - 1) as f64;
        self.rt_min * (self.rt_max / self.rt_min).powf(u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub seed: u64,
    /// One value, or one per band.
    pub rt_seconds: Vec<f64>,
    /// `6.90 / (RT·f_s)` for each entry of `rt_seconds`.
    pub lambda: Vec<f64>,
    pub alpha: f64,
    pub sample_rate: u32,
    pub n_samples: usize,
    pub floor_db: Option<f64>,
}

impl CorpusEntry {
    pub fn generate(&self) -> Result<SignalBuffer> {
        let rt = if self.rt_seconds.len() == 1 {
            RtSpec::Single(self.rt_seconds[0])
        } else {
            RtSpec::PerBand {
                rt_seconds: self.rt_seconds.clone(),
                plan: BandPlan::octave_default(self.sample_rate)?,
            }
        };
        let x = synth_rir(rt, self.alpha, self.n_samples, self.sample_rate, self.seed)?;
        match self.floor_db {
            None => Ok(x),
            Some(db) => {
                let sigma = noise_sigma_from_snr(&x, -db, SnrMode::Early50ms)?;
                let mut rng = NoiseStream::new(stream_id(&[&self.id, "floor", &self.seed.to_string()]));
                let v = x.samples().iter().map(|v| v + sigma * rng.standard_normal()).collect();
                x.with_samples(v)
            }
        }
    }
}

pub fn corpus_entries(spec: &CorpusSpec) -> Result<Vec<CorpusEntry>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let id = format!("rir{i:03}");
            let base = spec.rt_of(i);
            let rt_seconds = if spec.band_rt_factors.is_empty() {
                vec![base]
            } else {
                spec.band_rt_factors.iter().map(|f| base * f).collect()
            };
            Ok(CorpusEntry {
                seed: stream_id(&[&id, "rir", &spec.seed.to_string()]),
                lambda: rt_seconds.iter().map(|&rt| rt_to_lambda(rt, spec.sample_rate)).collect(),
                rt_seconds,
                alpha: spec.alpha,
                sample_rate: spec.sample_rate,
                n_samples: spec.n_samples(),
                floor_db: spec.floor_db,
                id,
            })
        })
        .collect()
}

/// Corpus entries with their generated signals.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<(CorpusEntry, SignalBuffer)>> {
    corpus_entries(spec)?
        .into_iter()
        .map(|e| {
            let x = e.generate()?;
            Ok((e, x))
        })
        .collect()
}

/// How a measurement is simulated from a clean RIR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementSetup {
    pub snr_db: f64,
    /// Laplacian component of robust deconvolution, relative to RMS(Hx).
    pub laplace_snr_db: f64,
    /// `None` uses a 1 s sweep from 20 Hz to 0.95·Nyquist.
    pub sweep: Option<SweepSpec>,
    pub gaps_s: Vec<(f64, f64)>,
    pub clip_c: f64,
    pub clip_zeta: f64,
}

impl Default for MeasurementSetup {
    fn default() -> Self {
        Self {
            snr_db: 30.0,
            laplace_snr_db: 30.0,
            sweep: None,
            gaps_s: vec![(0.1, 0.2), (0.5, 1.0)],
            clip_c: 0.1,
            clip_zeta: 1000.0,
        }
    }
}

impl MeasurementSetup {
    /// Paper defaults for a task; inpainting uses 100 dB.
    pub fn for_task(kind: TaskKind) -> Self {
        let mut s = Self::default();
        if kind == TaskKind::Inpaint {
            s.snr_db = 100.0;
        }
        s
    }

    pub fn excitation(&self, sample_rate: u32) -> Result<SignalBuffer> {
        self.sweep
            .unwrap_or_else(|| SweepSpec::default_for(sample_rate))
            .generate(sample_rate)
    }
}

/// A simulated observation plus everything needed to invert it.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub task: MeasurementTask,
    pub y: SignalBuffer,
    pub excitation: Option<SignalBuffer>,
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

fn level_to_sigma(rms: f64, snr_db: f64) -> Result<f64> {
    if rms == 0.0 {
        return Err(RirError::invalid("reference has zero energy"));
    }
    Ok(rms * 10f64.powf(-snr_db / 20.0))
}

/// Simulates the observation of `x` for `kind`. `item_id` selects the noise
/// streams, so the same id and seed always give the same measurement.
pub fn simulate(
    kind: TaskKind,
    x: &SignalBuffer,
    setup: &MeasurementSetup,
    item_id: &str,
    seed: u64,
) -> Result<Measurement> {
    let fs = x.sample_rate();
    let seed_s = seed.to_string();
    let stream = |label: &str| NoiseStream::new(stream_id(&[item_id, kind.as_str(), label, &seed_s]));
    match kind {
        TaskKind::Denoise | TaskKind::Inpaint => {
            let sigma_n = noise_sigma_from_snr(x, setup.snr_db, SnrMode::Early50ms)?;
            let mut rng = stream("gauss");
            let mut y: Vec<f64> = x.samples().iter().map(|v| v + sigma_n * rng.standard_normal()).collect();
            let task = if kind == TaskKind::Denoise {
                MeasurementTask::Denoise { sigma_n }
            } else {
                let mask = MaskOperator::with_gaps(x.len(), fs, &setup.gaps_s)?;
                y = mask.apply(&y);
                MeasurementTask::Inpaint { mask, sigma_n }
            };
            Ok(Measurement {
                task,
                y: SignalBuffer::new(y, fs)?,
                excitation: None,
            })
        }
        TaskKind::Deconv | TaskKind::DeconvRobust | TaskKind::Declip => {
            let h = setup.excitation(fs)?;
            let op = ConvOperator::new(&h, x.len())?;
            let clean = op.apply(x.samples());
            let mut gauss = stream("gauss");
            let (task, y) = match kind {
                TaskKind::Deconv => {
                    let sigma_n = level_to_sigma(rms(&clean), setup.snr_db)?;
                    let y: Vec<f64> = clean.iter().map(|v| v + sigma_n * gauss.standard_normal()).collect();
                    (MeasurementTask::Deconv { op, sigma_n }, y)
                }
                TaskKind::DeconvRobust => {
                    let level = rms(&clean);
                    let sigma_n = level_to_sigma(level, setup.snr_db)?;
                    let laplace_b = level_to_sigma(level, setup.laplace_snr_db)? / std::f64::consts::SQRT_2;
                    let mut lap = stream("laplace");
                    let y: Vec<f64> = clean
                        .iter()
                        .map(|v| v + sigma_n * gauss.standard_normal() + lap.laplace(laplace_b))
                        .collect();
                    (
                        MeasurementTask::DeconvRobust {
                            op,
                            sigma_n,
                            laplace_b,
                        },
                        y,
                    )
                }
                _ => {
                    let clip = ClipSpec::from_reference(setup.clip_c, setup.clip_zeta, &clean)?;
                    let clipped = hard_clip(&SignalBuffer::new(clean, fs)?, clip.tau)?.into_samples();
                    let sigma_n = level_to_sigma(rms(&clipped), setup.snr_db)?;
                    let y: Vec<f64> = clipped.iter().map(|v| v + sigma_n * gauss.standard_normal()).collect();
                    (MeasurementTask::Declip { op, clip, sigma_n }, y)
                }
            };
            Ok(Measurement {
                task,
                y: SignalBuffer::new(y, fs)?,
                excitation: Some(h),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::lambda_to_rt;

    #[test]
    fn stream_ids_are_stable_and_distinct() {
        assert_eq!(stream_id(&["a", "b"]), stream_id(&["a", "b"]));
        assert_ne!(stream_id(&["a", "b"]), stream_id(&["ab"]));
        assert_ne!(stream_id(&["a", "b"]), stream_id(&["b", "a"]));
    }

    #[test]
    fn corpus_spans_range_and_round_trips_lambda() {
        let spec = CorpusSpec::default();
        let entries = corpus_entries(&spec).unwrap();
        assert_eq!(entries.len(), 30);
        assert!((entries[0].rt_seconds[0] - 0.2).abs() < 1e-12);
        assert!((entries[29].rt_seconds[0] - 2.3).abs() < 1e-12);
        for e in &entries {
            let back = lambda_to_rt(e.lambda[0], e.sample_rate);
            assert!((back - e.rt_seconds[0]).abs() <= 1e-12 * e.rt_seconds[0]);
        }
        let a = entries[3].generate().unwrap();
        assert_eq!(a, entries[3].generate().unwrap());
        assert_ne!(a, entries[4].generate().unwrap());
        assert_eq!(a.len(), 12000);
    }

    #[test]
    fn per_band_corpus() {
        let spec = CorpusSpec {
            count: 2,
            band_rt_factors: vec![1.3, 1.2, 1.0, 0.9, 0.7],
            ..Default::default()
        };
        let c = synth_corpus(&spec).unwrap();
        assert_eq!(c[0].0.rt_seconds.len(), 5);
        // tail sits on the floor, 80 dB under the first 50 ms
        let x = c[0].1.samples();
        let early = (x[..400].iter().map(|v| v * v).sum::<f64>() / 400.0).sqrt();
        let tail = (x[11000..].iter().map(|v| v * v).sum::<f64>() / 1000.0).sqrt();
        let rel = 20.0 * (tail / early).log10();
        assert!((rel + 80.0).abs() < 1.0, "{rel}");
        assert!(c[0].1.samples().iter().all(|v| v.is_finite()));
    }

    fn rir() -> SignalBuffer {
        synth_rir(0.5, 1.0, 4000, 8000, 1).unwrap()
    }

    #[test]
    fn simulated_noise_levels() {
        let x = rir();
        let setup = MeasurementSetup {
            sweep: Some(SweepSpec {
                duration_s: 0.25,
                ..SweepSpec::default_for(8000)
            }),
            ..Default::default()
        };
        let m = simulate(TaskKind::Denoise, &x, &setup, "a", 0).unwrap();
        let sigma = m.task.sigma_n();
        let resid: Vec<f64> = m.y.samples().iter().zip(x.samples()).map(|(a, b)| a - b).collect();
        assert!((rms(&resid) / sigma - 1.0).abs() < 0.05);

        let m = simulate(TaskKind::Deconv, &x, &setup, "a", 0).unwrap();
        let h = m.excitation.clone().unwrap();
        assert_eq!(m.y.len(), x.len() + h.len() - 1);
        let clean = ConvOperator::new(&h, x.len()).unwrap().apply(x.samples());
        let snr = 20.0 * (rms(&clean) / m.task.sigma_n()).log10();
        assert!((snr - 30.0).abs() < 1e-9);

        let m = simulate(TaskKind::DeconvRobust, &x, &setup, "a", 0).unwrap();
        match m.task {
            MeasurementTask::DeconvRobust { sigma_n, laplace_b, .. } => {
                assert!((laplace_b * 2f64.sqrt() - sigma_n).abs() < 1e-12);
            }
            _ => unreachable!(),
        }

        let m = simulate(TaskKind::Declip, &x, &setup, "a", 0).unwrap();
        match &m.task {
            MeasurementTask::Declip { clip, sigma_n, .. } => {
                let peak = clean.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!((clip.tau - 0.1 * peak).abs() < 1e-12);
                let over = m.y.samples().iter().filter(|v| v.abs() > clip.tau + 6.0 * sigma_n).count();
                assert_eq!(over, 0);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn inpainting_zeroes_gaps_and_streams_differ() {
        let x = synth_rir(0.5, 1.0, 12000, 8000, 2).unwrap();
        let m = simulate(TaskKind::Inpaint, &x, &MeasurementSetup::for_task(TaskKind::Inpaint), "b", 0).unwrap();
        assert!(m.y.samples()[800..1600].iter().all(|&v| v == 0.0));
        assert!(m.y.samples()[4000..8000].iter().all(|&v| v == 0.0));
        assert!((m.y.samples()[100] - x.samples()[100]).abs() < 1e-3);
        let a = simulate(TaskKind::Denoise, &x, &MeasurementSetup::default(), "b", 0).unwrap();
        let b = simulate(TaskKind::Denoise, &x, &MeasurementSetup::default(), "c", 0).unwrap();
        assert_ne!(a.y, b.y);
        let c = simulate(TaskKind::Denoise, &x, &MeasurementSetup::default(), "b", 0).unwrap();
        assert_eq!(a.y, c.y);
    }
}
