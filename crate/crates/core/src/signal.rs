//! Signal carrier, energy-decay utilities and the exponential-decay RIR generator.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RirError};
use crate::filterbank::{BandPlan, FilterDesign, Filterbank};
use crate::rng::NoiseStream;

/// Ratio between the 60 dB decay time and the amplitude decay constant:
/// `ln(10^3) ≈ 6.90`.
pub const DECAY_CONSTANT: f64 = 6.90;

/// Converts a reverberation time in seconds to the per-sample amplitude decay rate.
pub fn rt_to_lambda(rt_seconds: f64, sample_rate: u32) -> f64 {
    DECAY_CONSTANT / (rt_seconds * sample_rate as f64)
}

pub fn lambda_to_rt(lambda: f64, sample_rate: u32) -> f64 {
    DECAY_CONSTANT / (lambda * sample_rate as f64)
}

/// A finite, real, single-channel discrete-time signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl SignalBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(RirError::invalid("signal must contain at least one sample"));
        }
        if sample_rate == 0 {
            return Err(RirError::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(RirError::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.samples.len() as f64).sqrt()
    }

    /// Same sample rate, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, self.sample_rate)
    }
}

/// Backward-integrated energy, `values[m] = Σ_{k ≥ m} x_k²`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdcCurve {
    pub values: Vec<f64>,
}

impl EdcCurve {
    pub fn total_energy(&self) -> f64 {
        self.values[0]
    }
}

/// Additive measurement noise description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_n: f64,
    pub laplace_b: Option<f64>,
}

impl NoiseSpec {
    pub fn gaussian(sigma_n: f64) -> Result<Self> {
        Self::new(sigma_n, None)
    }

    pub fn new(sigma_n: f64, laplace_b: Option<f64>) -> Result<Self> {
        if !(sigma_n >= 0.0) || !sigma_n.is_finite() {
            return Err(RirError::invalid("sigma_n must be finite and non-negative"));
        }
        if let Some(b) = laplace_b {
            if !(b > 0.0) || !b.is_finite() {
                return Err(RirError::invalid("Laplacian scale must be positive"));
            }
        }
        Ok(Self { sigma_n, laplace_b })
    }
}

/// Schroeder backward integration of the squared signal.
pub fn schroeder_edc(x: &SignalBuffer) -> EdcCurve {
    EdcCurve {
        values: backward_energy(x.samples()),
    }
}

pub(crate) fn backward_energy(x: &[f64]) -> Vec<f64> {
    let mut values = vec![0.0; x.len()];
    let mut acc = 0.0;
    for (v, s) in values.iter_mut().zip(x).rev() {
        acc += s * s;
        *v = acc;
    }
    values
}

/// Which part of the reference sets the signal level for an SNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrMode {
    /// RMS over the whole reference.
    RmsFull,
    /// RMS over the first 50 ms, rounded down to whole samples.
    Early50ms,
}

/// Gaussian noise standard deviation giving `snr_db` relative to the reference level.
pub fn noise_sigma_from_snr(reference: &SignalBuffer, snr_db: f64, mode: SnrMode) -> Result<f64> {
    let x = reference.samples();
    let segment = match mode {
        SnrMode::RmsFull => x,
        SnrMode::Early50ms => {
            let n = (0.05 * reference.sample_rate() as f64).floor() as usize;
            if n == 0 || n > x.len() {
                return Err(RirError::invalid(format!(
                    "reference has {} samples, early-energy mode needs {n}",
                    x.len()
                )));
            }
            &x[..n]
        }
    };
    let rms = (segment.iter().map(|v| v * v).sum::<f64>() / segment.len() as f64).sqrt();
    if rms == 0.0 {
        return Err(RirError::invalid("reference has zero energy"));
    }
    Ok(rms * 10f64.powf(-snr_db / 20.0))
}

/// Reverberation time for the generator: one broadband value or one per band.
#[derive(Debug, Clone, PartialEq)]
pub enum RtSpec {
    Single(f64),
    PerBand { rt_seconds: Vec<f64>, plan: BandPlan },
}

impl From<f64> for RtSpec {
    fn from(rt: f64) -> Self {
        RtSpec::Single(rt)
    }
}

/// Draws an RIR from the exponentially decaying Gaussian model,
/// `x_k ~ N(0, α² e^{-2λk})` with `λ = 6.90 / (RT·f_s)`.
///
/// In per-band mode each band is drawn from its own stream with its own decay
/// and only that band's spectral component is kept before summing.
pub fn synth_rir(
    rt: impl Into<RtSpec>,
    alpha: f64,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<SignalBuffer> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(RirError::invalid("alpha must be positive"));
    }
    if n_samples == 0 {
        return Err(RirError::invalid("n_samples must be at least 1"));
    }
    if sample_rate == 0 {
        return Err(RirError::invalid("sample rate must be positive"));
    }
    match rt.into() {
        RtSpec::Single(rt) => {
            check_rt(rt)?;
            let mut rng = NoiseStream::new(seed);
            let samples = decaying_noise(&mut rng, rt_to_lambda(rt, sample_rate), alpha, n_samples);
            SignalBuffer::new(samples, sample_rate)
        }
        RtSpec::PerBand { rt_seconds, plan } => {
            if rt_seconds.len() != plan.len() {
                return Err(RirError::config(format!(
                    "{} band RTs for a {}-band plan",
                    rt_seconds.len(),
                    plan.len()
                )));
            }
            plan.check_sample_rate(sample_rate)?;
            // padded smooth bank: a circular split would wrap the loud onset
            // into the quiet tail
            let fb = Filterbank::with_design(&plan, n_samples, sample_rate, FilterDesign::smooth_default())?;
            let mut out = vec![0.0; n_samples];
            for (b, &rt) in rt_seconds.iter().enumerate() {
                check_rt(rt)?;
                let mut rng = NoiseStream::with_stream(seed, b as u64 + 1);
                let noise =
                    decaying_noise(&mut rng, rt_to_lambda(rt, sample_rate), alpha, n_samples);
                let bands = fb.split(&noise)?;
                for (o, v) in out.iter_mut().zip(&bands[b]) {
                    *o += v;
                }
            }
            SignalBuffer::new(out, sample_rate)
        }
    }
}

fn check_rt(rt: f64) -> Result<()> {
    if !(rt > 0.0) || !rt.is_finite() {
        return Err(RirError::invalid("reverberation time must be positive"));
    }
    Ok(())
}

fn decaying_noise(rng: &mut NoiseStream, lambda: f64, alpha: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| alpha * (-lambda * k as f64).exp() * rng.standard_normal())
        .collect()
}
