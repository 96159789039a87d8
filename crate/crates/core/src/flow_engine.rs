//! Guided flow sampler: denoise, refine against the measurement, inject
//! uncertainty, move along the straight path. Also unguided prior sampling.

use serde::{Deserialize, Serialize};

use crate::decay_prior::{BandNoiseRule, GridSpec, MultibandDenoiser};
use crate::error::{Result, RirError};
use crate::filterbank::{BandPlan, FilterDesign};
use crate::refine::SolverTolerances;
use crate::rng::NoiseStream;
use crate::signal::SignalBuffer;
use crate::task::MeasurementTask;

const STREAM_SOURCE: u64 = 0;
const STREAM_KAPPA: u64 = 1;
const STREAM_PATH: u64 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

/// `t_j = (1 − cos(πj/T))/2` for `j = 0..T−1`.
pub fn cosine_times(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(RirError::config("the flow needs at least 2 steps"));
    }
    let mut t: Vec<f64> = (0..steps)
        .map(|j| (1.0 - (std::f64::consts::PI * j as f64 / steps as f64).cos()) / 2.0)
        .collect();
    t[0] = 0.0;
    if steps % 2 == 0 {
        t[steps / 2] = 0.5;
    }
    Ok(t)
}

/// `ν_t = (1−t)/√(t² + (1−t)²)`.
pub fn nu_of_t(t: f64) -> f64 {
    let s = 1.0 - t;
    s / (t * t + s * s).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub steps_t: usize,
    pub gamma: f64,
    pub schedule: Schedule,
    /// `None` selects the default octave plan for the signal's sample rate.
    pub band_plan: Option<BandPlan>,
    pub filter: FilterDesign,
    pub grid: GridSpec,
    pub band_noise: BandNoiseRule,
    pub tolerances: SolverTolerances,
    pub seed: u64,
    /// Steps whose `x̃₁` is copied into the trace.
    pub snapshot_steps: Vec<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps_t: 1000,
            gamma: 0.9,
            schedule: Schedule::Cosine,
            band_plan: None,
            filter: FilterDesign::smooth_default(),
            grid: GridSpec::default(),
            band_noise: BandNoiseRule::default(),
            tolerances: SolverTolerances::default(),
            seed: 0,
            snapshot_steps: Vec::new(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_t < 2 {
            return Err(RirError::config("steps_t must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RirError::config("gamma must lie in [0, 1]"));
        }
        self.tolerances.validate()
    }

    pub fn resolve_plan(&self, sample_rate: u32) -> Result<BandPlan> {
        match &self.band_plan {
            Some(p) => {
                p.check_sample_rate(sample_rate)?;
                Ok(p.clone())
            }
            None => BandPlan::octave_default(sample_rate),
        }
    }

    fn denoiser(&self, n: usize, sample_rate: u32) -> Result<MultibandDenoiser> {
        let plan = self.resolve_plan(sample_rate)?;
        Ok(
            MultibandDenoiser::with_design(&plan, self.grid.build(sample_rate, n)?, self.filter)?
                .with_noise_rule(self.band_noise),
        )
    }
}

/// State entering one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStepState {
    pub t: f64,
    pub x_t: SignalBuffer,
    pub nu_t: f64,
}

impl FlowStepState {
    pub fn new(t: f64, x_t: SignalBuffer) -> Self {
        Self {
            t,
            nu_t: nu_of_t(t),
            x_t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub t_next: f64,
    pub nu_t: f64,
    pub cg_iterations: usize,
    pub outer_iterations: usize,
    pub max_relative_residual: f64,
    pub stalled: bool,
    pub inexact_solves: usize,
    /// False when `γ = 0`, in which case `x̃₁ = μ_t`.
    pub kappa_applied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl FlowTrace {
    pub fn total_cg_iterations(&self) -> usize {
        self.records.iter().map(|r| r.cg_iterations).sum()
    }

    pub fn stalled_steps(&self) -> usize {
        self.records.iter().filter(|r| r.stalled).count()
    }

    pub fn inexact_solves(&self) -> usize {
        self.records.iter().map(|r| r.inexact_solves).sum()
    }
}

/// Guided posterior sampling for one measurement. Returns the last `x̃₁`.
pub fn run(
    task: &MeasurementTask,
    y: &SignalBuffer,
    cfg: &FlowConfig,
) -> Result<(SignalBuffer, FlowTrace)> {
    cfg.validate()?;
    let n = task.unknown_len(y)?;
    let fs = y.sample_rate();
    let denoiser = cfg.denoiser(n, fs)?;
    let times = cosine_times(cfg.steps_t)?;

    let mut source = NoiseStream::with_stream(cfg.seed, STREAM_SOURCE);
    let mut kappa_rng = NoiseStream::with_stream(cfg.seed, STREAM_KAPPA);
    let mut path_rng = NoiseStream::with_stream(cfg.seed, STREAM_PATH);
    let use_kappa = cfg.gamma > 0.0;

    let mut x = source.normal_vec(n);
    let mut x_tilde = vec![0.0; n];
    let mut trace = FlowTrace::default();
    for (j, &t) in times.iter().enumerate() {
        let t_next = times.get(j + 1).copied().unwrap_or(1.0);
        let nu = nu_of_t(t);
        let x_hat = SignalBuffer::new(denoiser.denoise(&x, t)?, fs)?;
        let rng = if use_kappa { Some(&mut kappa_rng) } else { None };
        let refined = task
            .refine(y, &x_hat, nu, &cfg.tolerances, rng)
            .map_err(|e| RirError::FlowStep {
                step: j,
                source: Box::new(e),
            })?;
        x_tilde = refined.mu.into_samples();
        if use_kappa {
            for (xt, k) in x_tilde.iter_mut().zip(refined.kappa.samples()) {
                *xt += cfg.gamma * k;
            }
        }
        if t_next < 1.0 {
            let eps = path_rng.normal_vec(n);
            for ((xi, e), xt) in x.iter_mut().zip(&eps).zip(&x_tilde) {
                *xi = (1.0 - t_next) * e + t_next * xt;
            }
        }
        let d = &refined.diagnostics;
        trace.records.push(StepRecord {
            step: j,
            t,
            t_next,
            nu_t: nu,
            cg_iterations: d.cg_iterations,
            outer_iterations: d.outer_iterations,
            max_relative_residual: d.max_relative_residual,
            stalled: d.stalled,
            inexact_solves: d.inexact_solves,
            kappa_applied: use_kappa,
        });
        if cfg.snapshot_steps.contains(&j) {
            trace.snapshots.push((j, x_tilde.clone()));
        }
    }
    if x_tilde.iter().any(|v| !v.is_finite()) {
        return Err(RirError::Domain("flow produced non-finite samples".into()));
    }
    Ok((SignalBuffer::new(x_tilde, fs)?, trace))
}

/// Unguided Euler integration of the analytic vector field from `N(0, I)`.
/// The last step returns the denoiser output instead of dividing by `1 − t`.
pub fn sample_prior(
    cfg: &FlowConfig,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<SignalBuffer> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(RirError::invalid("n_samples must be at least 1"));
    }
    let denoiser = cfg.denoiser(n_samples, sample_rate)?;
    let times = cosine_times(cfg.steps_t)?;
    let mut x = NoiseStream::with_stream(seed, STREAM_SOURCE).normal_vec(n_samples);
    for (j, &t) in times.iter().enumerate() {
        let d = denoiser.denoise(&x, t)?;
        match times.get(j + 1) {
            Some(&t_next) => {
                let h = (t_next - t) / (1.0 - t);
                for (xi, di) in x.iter_mut().zip(&d) {
                    *xi += h * (di - *xi);
                }
            }
            None => x = d,
        }
    }
    SignalBuffer::new(x, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::st_nmse;
    use crate::signal::{noise_sigma_from_snr, schroeder_edc, synth_rir, SnrMode};

    fn small_cfg(steps: usize, gamma: f64) -> FlowConfig {
        FlowConfig {
            steps_t: steps,
            gamma,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let t = cosine_times(4).unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[2], 0.5);
        assert!((t[1] - 0.146447).abs() < 1e-6);
        let t = cosine_times(1000).unwrap();
        assert_eq!(t.len(), 1000);
        assert_eq!(t[500], 0.5);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert!(*t.last().unwrap() < 1.0);
        assert!(cosine_times(1).is_err());
    }

    #[test]
    fn nu_examples() {
        assert_eq!(nu_of_t(0.0), 1.0);
        assert_eq!(nu_of_t(1.0), 0.0);
        assert!((nu_of_t(0.5) - 0.707107).abs() < 1e-6);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let v = nu_of_t(i as f64 / 1000.0);
            assert!(v < prev);
            prev = v;
        }
        let s = FlowStepState::new(0.25, SignalBuffer::new(vec![0.0], 8000).unwrap());
        assert_eq!(s.nu_t, 0.75 / (0.0625f64 + 0.5625).sqrt());
    }

    #[test]
    fn config_validation() {
        assert!(small_cfg(1, 0.9).validate().is_err());
        assert!(small_cfg(10, 1.5).validate().is_err());
        assert!(small_cfg(10, 0.0).validate().is_ok());
    }

    fn noisy(seed: u64, snr_db: f64, n: usize) -> (SignalBuffer, SignalBuffer, f64) {
        let x = synth_rir(0.4, 1.0, n, 8000, seed).unwrap();
        let sigma = noise_sigma_from_snr(&x, snr_db, SnrMode::Early50ms).unwrap();
        let mut rng = NoiseStream::with_stream(seed, 99);
        let y: Vec<f64> = x.samples().iter().map(|v| v + sigma * rng.standard_normal()).collect();
        (x.clone(), SignalBuffer::new(y, 8000).unwrap(), sigma)
    }

    #[test]
    fn high_precision_measurement_is_reproduced() {
        let (_, y, _) = noisy(1, 30.0, 2000);
        let sigma = 1e-6 * y.rms();
        let (out, trace) = run(&MeasurementTask::Denoise { sigma_n: sigma }, &y, &small_cfg(20, 0.0)).unwrap();
        let err: f64 = out.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(10.0 * (err / y.energy()).log10() < -60.0);
        assert!(trace.records.iter().all(|r| !r.kappa_applied));
        assert_eq!(trace.records.len(), 20);
        assert_eq!(trace.records.last().unwrap().t_next, 1.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let (_, y, sigma) = noisy(2, 30.0, 1600);
        let task = MeasurementTask::Denoise { sigma_n: sigma };
        let cfg = FlowConfig {
            snapshot_steps: vec![3],
            ..small_cfg(16, 0.9)
        };
        let a = run(&task, &y, &cfg).unwrap();
        let b = run(&task, &y, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.snapshots.len(), 1);
    }

    #[test]
    fn returns_last_refined_estimate() {
        let (_, y, sigma) = noisy(3, 30.0, 1200);
        let cfg = FlowConfig {
            snapshot_steps: vec![9],
            ..small_cfg(10, 0.9)
        };
        let (out, trace) = run(&MeasurementTask::Denoise { sigma_n: sigma }, &y, &cfg).unwrap();
        assert_eq!(out.samples(), trace.snapshots[0].1.as_slice());
    }

    #[test]
    fn denoising_beats_the_noisy_input() {
        let mut wins = 0;
        for seed in 0..5 {
            let (x, y, sigma) = noisy(10 + seed, 30.0, 4000);
            let (out, _) = run(&MeasurementTask::Denoise { sigma_n: sigma }, &y, &small_cfg(50, 0.9)).unwrap();
            let a = st_nmse(&x, &out).unwrap().avg;
            let b = st_nmse(&x, &y).unwrap().avg;
            if a < b {
                wins += 1;
            }
        }
        assert_eq!(wins, 5);
    }

    #[test]
    fn prior_sample_is_sane() {
        let cfg = small_cfg(50, 0.9);
        let s = sample_prior(&cfg, 2000, 8000, 4).unwrap();
        assert!(s.samples().iter().all(|v| v.is_finite()));
        assert!(s.energy() > 0.0);
        let e = schroeder_edc(&s);
        assert!(e.values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_mismatched_measurement() {
        let y = SignalBuffer::new(vec![0.1; 100], 8000).unwrap();
        let task = MeasurementTask::Inpaint {
            mask: crate::forward_ops::MaskOperator::new(vec![true; 50]),
            sigma_n: 0.1,
        };
        assert!(run(&task, &y, &small_cfg(4, 0.9)).is_err());
    }
}
