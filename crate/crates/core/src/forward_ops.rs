//! Measurement operators and their adjoints / Jacobians.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RirError};
use crate::signal::SignalBuffer;

/// A real linear map `ℝ^input_len → ℝ^output_len` with its transpose.
///
/// The slice methods assume correctly sized inputs; length checks live in the
/// public free functions.
pub trait LinearOperator: Send + Sync {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, r: &[f64]) -> Vec<f64>;

    /// `AᵀA x`.
    fn gram(&self, x: &[f64]) -> Vec<f64> {
        self.adjoint(&self.apply(x))
    }

    /// Circulant surrogate of `AᵀA`, when the operator has one.
    fn circulant(&self) -> Option<CirculantGram> {
        None
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity {
    pub len: usize,
}

impl LinearOperator for Identity {
    fn input_len(&self) -> usize {
        self.len
    }
    fn output_len(&self) -> usize {
        self.len
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }
}

/// Zero-padded real FFT engine of one fixed length. Spectra hold the
/// `len/2 + 1` non-negative frequency bins.
#[derive(Clone)]
struct Spectral {
    len: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl Spectral {
    fn new(len: usize) -> Self {
        let mut planner = RealFftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    fn transform(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![0.0; self.len];
        buf[..x.len()].copy_from_slice(x);
        let mut spec = self.forward.make_output_vec();
        self.forward
            .process(&mut buf, &mut spec)
            .expect("buffer lengths come from the plan");
        spec
    }

    /// Inverse transform, first `keep` samples, scaled by 1/len.
    fn inverse_real(&self, mut spec: Vec<Complex64>, keep: usize) -> Vec<f64> {
        // the DC and Nyquist bins of a real signal's spectrum are real; drop
        // round-off so the inverse accepts them
        spec[0].im = 0.0;
        if self.len % 2 == 0 {
            spec[self.len / 2].im = 0.0;
        }
        let mut out = self.inverse.make_output_vec();
        self.inverse
            .process(&mut spec, &mut out)
            .expect("buffer lengths come from the plan");
        let s = 1.0 / self.len as f64;
        out.truncate(keep);
        out.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// Smallest `2^a 3^b 5^c ≥ n`.
pub fn fast_len(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p5 = 1;
    while p5 < best {
        let mut p35 = p5;
        while p35 < best {
            let mut m = p35;
            while m < n {
                m *= 2;
            }
            best = best.min(m);
            p35 *= 3;
        }
        p5 *= 5;
    }
    best
}

/// Full linear convolution with a known kernel, `y = h * x`, length `N + M − 1`.
#[derive(Clone)]
pub struct ConvOperator {
    kernel: Vec<f64>,
    input_len: usize,
    spectral: Spectral,
    kernel_spectrum: Vec<Complex64>,
}

impl std::fmt::Debug for ConvOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvOperator")
            .field("kernel_len", &self.kernel.len())
            .field("input_len", &self.input_len)
            .field("fft_len", &self.spectral.len)
            .finish()
    }
}

impl ConvOperator {
    pub fn new(kernel: &SignalBuffer, input_len: usize) -> Result<Self> {
        Self::from_slice(kernel.samples(), input_len)
    }

    pub fn from_slice(kernel: &[f64], input_len: usize) -> Result<Self> {
        if kernel.is_empty() || input_len == 0 {
            return Err(RirError::invalid("convolution needs a kernel and a positive input length"));
        }
        let out = input_len + kernel.len() - 1;
        let spectral = Spectral::new(fast_len(out));
        let kernel_spectrum = spectral.transform(kernel);
        Ok(Self {
            kernel: kernel.to_vec(),
            input_len,
            spectral,
            kernel_spectrum,
        })
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.len()
    }

    pub fn fft_len(&self) -> usize {
        self.spectral.len
    }
}

impl LinearOperator for ConvOperator {
    fn input_len(&self) -> usize {
        self.input_len
    }

    fn output_len(&self) -> usize {
        self.input_len + self.kernel.len() - 1
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut spec = self.spectral.transform(x);
        for (s, h) in spec.iter_mut().zip(&self.kernel_spectrum) {
            *s *= h;
        }
        self.spectral.inverse_real(spec, self.output_len())
    }

    /// Correlation with the kernel (convolution with the time-reversed kernel),
    /// cropped to the input length. No wrap-around occurs because the FFT
    /// length covers the full output.
    fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        let mut spec = self.spectral.transform(r);
        for (s, h) in spec.iter_mut().zip(&self.kernel_spectrum) {
            *s *= h.conj();
        }
        self.spectral.inverse_real(spec, self.input_len)
    }

    fn gram(&self, x: &[f64]) -> Vec<f64> {
        let mut spec = self.spectral.transform(x);
        for (s, h) in spec.iter_mut().zip(&self.kernel_spectrum) {
            *s *= h.norm_sqr();
        }
        self.spectral.inverse_real(spec, self.input_len)
    }

    fn circulant(&self) -> Option<CirculantGram> {
        Some(CirculantGram {
            spectral: self.spectral.clone(),
            power: self.kernel_spectrum.iter().map(|h| h.norm_sqr()).collect(),
            input_len: self.input_len,
        })
    }
}

/// `|H(f)|²` on the zero-padded FFT grid, used to build circulant
/// preconditioners `(a + b·|H|²)^{-1}` for shifted normal equations.
#[derive(Clone)]
pub struct CirculantGram {
    spectral: Spectral,
    power: Vec<f64>,
    input_len: usize,
}

impl CirculantGram {
    pub fn power(&self) -> &[f64] {
        &self.power
    }

    /// `crop ∘ F⁻¹ diag(1/(shift + scale·|H|²)) F ∘ pad`; symmetric positive definite.
    pub fn solve_shifted(&self, r: &[f64], shift: f64, scale: f64) -> Vec<f64> {
        let mut spec = self.spectral.transform(r);
        for (s, p) in spec.iter_mut().zip(&self.power) {
            *s /= shift + scale * p;
        }
        self.spectral.inverse_real(spec, self.input_len)
    }
}

pub fn convolve(op: &ConvOperator, x: &SignalBuffer) -> Result<SignalBuffer> {
    check_len(op.input_len(), x.len())?;
    x.with_samples(op.apply(x.samples()))
}

pub fn convolve_adjoint(op: &ConvOperator, r: &SignalBuffer) -> Result<SignalBuffer> {
    check_len(op.output_len(), r.len())?;
    r.with_samples(op.adjoint(r.samples()))
}

/// Diagonal 0/1 sampling operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOperator {
    pub keep: Vec<bool>,
}

impl MaskOperator {
    pub fn new(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    /// Everything observed except the given `[start, end)` spans in seconds.
    pub fn with_gaps(n: usize, sample_rate: u32, gaps_s: &[(f64, f64)]) -> Result<Self> {
        let mut keep = vec![true; n];
        for &(a, b) in gaps_s {
            if !(a >= 0.0 && b > a) {
                return Err(RirError::config(format!("invalid gap [{a}, {b})")));
            }
            let start = (a * sample_rate as f64).round() as usize;
            let end = ((b * sample_rate as f64).round() as usize).min(n);
            for k in keep.iter_mut().take(end).skip(start) {
                *k = false;
            }
        }
        Ok(Self { keep })
    }

    pub fn observed_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

impl LinearOperator for MaskOperator {
    fn input_len(&self) -> usize {
        self.keep.len()
    }
    fn output_len(&self) -> usize {
        self.keep.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect()
    }
    fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        self.apply(r)
    }
}

pub fn apply_mask(m: &MaskOperator, x: &SignalBuffer) -> Result<SignalBuffer> {
    check_len(m.keep.len(), x.len())?;
    x.with_samples(m.apply(x.samples()))
}

/// Smooth clipping parameters. `tau` is the threshold, `zeta` the sharpness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub c: f64,
    pub zeta: f64,
    pub tau: f64,
}

impl ClipSpec {
    pub fn new(c: f64, zeta: f64, tau: f64) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(RirError::config("clip level c must lie in (0, 1]"));
        }
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(RirError::config("clip smoothness must be positive"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(RirError::config("clip threshold must be positive"));
        }
        Ok(Self { c, zeta, tau })
    }

    /// `τ = c · max |reference|`.
    pub fn from_reference(c: f64, zeta: f64, reference: &[f64]) -> Result<Self> {
        let peak = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self::new(c, zeta, c * peak)
    }
}

#[inline]
fn softplus_over(z: f64, zeta: f64) -> f64 {
    if z > 30.0 {
        z / zeta
    } else if z < -30.0 {
        z.exp() / zeta
    } else {
        z.exp().ln_1p() / zeta
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn soft_clip_scalar(x: f64, spec: &ClipSpec) -> f64 {
    let z = spec.zeta;
    x - softplus_over(z * (x - spec.tau), z) + softplus_over(z * (-x - spec.tau), z)
}

#[inline]
pub fn soft_clip_deriv_scalar(x: f64, spec: &ClipSpec) -> f64 {
    let z = spec.zeta;
    1.0 - logistic(z * (x - spec.tau)) - logistic(z * (-x - spec.tau))
}

pub fn soft_clip(x: &SignalBuffer, spec: &ClipSpec) -> SignalBuffer {
    let v = x.samples().iter().map(|&v| soft_clip_scalar(v, spec)).collect();
    x.with_samples(v).expect("soft clip keeps samples finite")
}

pub fn soft_clip_deriv(x: &SignalBuffer, spec: &ClipSpec) -> SignalBuffer {
    let v = x
        .samples()
        .iter()
        .map(|&v| soft_clip_deriv_scalar(v, spec))
        .collect();
    x.with_samples(v).expect("derivative is bounded")
}

pub fn hard_clip(x: &SignalBuffer, tau: f64) -> Result<SignalBuffer> {
    if !(tau > 0.0) {
        return Err(RirError::invalid("clip threshold must be positive"));
    }
    x.with_samples(x.samples().iter().map(|v| v.clamp(-tau, tau)).collect())
}

/// Exponential sine sweep description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub duration_s: f64,
    pub f_start: f64,
    pub f_end: f64,
    #[serde(default)]
    pub fade_in_s: f64,
    #[serde(default)]
    pub fade_out_s: f64,
}

impl SweepSpec {
    /// 1 s sweep from 20 Hz to 95% of Nyquist, no fades.
    pub fn default_for(sample_rate: u32) -> Self {
        Self {
            duration_s: 1.0,
            f_start: 20.0,
            f_end: 0.95 * sample_rate as f64 / 2.0,
            fade_in_s: 0.0,
            fade_out_s: 0.0,
        }
    }

    /// Phase in radians at time `t` seconds.
    pub fn phase(&self, t: f64) -> f64 {
        let rate = (self.f_end / self.f_start).ln();
        2.0 * PI * self.f_start * self.duration_s / rate * ((t * rate / self.duration_s).exp() - 1.0)
    }

    pub fn generate(&self, sample_rate: u32) -> Result<SignalBuffer> {
        ess_sweep_with(self, sample_rate)
    }
}

pub fn ess_sweep(duration_s: f64, f_start: f64, f_end: f64, sample_rate: u32) -> Result<SignalBuffer> {
    ess_sweep_with(
        &SweepSpec {
            duration_s,
            f_start,
            f_end,
            fade_in_s: 0.0,
            fade_out_s: 0.0,
        },
        sample_rate,
    )
}

fn ess_sweep_with(spec: &SweepSpec, sample_rate: u32) -> Result<SignalBuffer> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(spec.f_start > 0.0 && spec.f_start < spec.f_end && spec.f_end <= nyquist) {
        return Err(RirError::config(format!(
            "sweep range {}..{} Hz must satisfy 0 < start < end <= {nyquist}",
            spec.f_start, spec.f_end
        )));
    }
    if !(spec.duration_s > 0.0) {
        return Err(RirError::config("sweep duration must be positive"));
    }
    let n = (spec.duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(RirError::config("sweep is shorter than one sample"));
    }
    let fs = sample_rate as f64;
    let fade_in = (spec.fade_in_s * fs) as usize;
    let fade_out = (spec.fade_out_s * fs) as usize;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let mut v = spec.phase(i as f64 / fs).sin();
            if i < fade_in {
                v *= 0.5 - 0.5 * (PI * i as f64 / fade_in as f64).cos();
            }
            let from_end = n - 1 - i;
            if from_end < fade_out {
                v *= 0.5 - 0.5 * (PI * from_end as f64 / fade_out as f64).cos();
            }
            v
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    SignalBuffer::new(x, sample_rate)
}
