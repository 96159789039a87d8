//! Reference methods: Lundeby decay analysis, truncate-and-resynthesize
//! denoising, and measurement-only maximum-likelihood solvers.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RirError};
use crate::filterbank::{BandPlan, Filterbank};
use crate::forward_ops::{ClipSpec, ConvOperator, LinearOperator};
use crate::refine::{DeclipProblem, HuberProblem, RefineDiagnostics, SolverTolerances};
use crate::rng::NoiseStream;
use crate::signal::{SignalBuffer, DECAY_CONSTANT};
use crate::solver::conjugate_gradient;

/// Tikhonov shift added to the normal equations of the MLE solvers.
pub const MLE_SHIFT: f64 = 1e-8;

const MAX_ITERATIONS: usize = 10;
const INITIAL_INTERVAL_S: f64 = 0.010;
const MIN_INTERVAL_S: f64 = 0.010;
const MAX_INTERVAL_S: f64 = 0.050;
const TAIL_FRACTION: f64 = 0.1;
const REGRESSION_TOP_DB: f64 = 5.0;
const REGRESSION_MARGIN_DB: f64 = 10.0;
const NOISE_SHIFT_DB: f64 = 10.0;
const LEVEL_FLOOR_DB: f64 = -300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LundebyEstimate {
    pub rt_seconds: f64,
    /// Mean noise power in dB (10·log10 of the mean squared sample).
    pub noise_floor_db: f64,
    pub truncation_index: usize,
    /// False when the procedure could not produce a valid estimate.
    pub converged: bool,
    /// Decay-line level in dB at `truncation_index`.
    pub level_at_truncation_db: f64,
    pub iterations: usize,
}

impl LundebyEstimate {
    fn failed(noise_floor_db: f64, iterations: usize) -> Self {
        Self {
            rt_seconds: f64::NAN,
            noise_floor_db,
            truncation_index: 0,
            converged: false,
            level_at_truncation_db: f64::NAN,
            iterations,
        }
    }
}

fn db(p: f64) -> f64 {
    if p > 0.0 {
        (10.0 * p.log10()).max(LEVEL_FLOOR_DB)
    } else {
        LEVEL_FLOOR_DB
    }
}

/// Interval centres in seconds and mean-square levels in dB.
fn envelope(e: &[f64], len: usize, fs: f64) -> (Vec<f64>, Vec<f64>) {
    let count = e.len() / len;
    (0..count)
        .map(|i| {
            let s = &e[i * len..(i + 1) * len];
            let centre = (i as f64 + 0.5) * len as f64 / fs;
            (centre, db(s.iter().sum::<f64>() / len as f64))
        })
        .unzip()
}

/// Least-squares line through the intervals from the peak down to
/// `noise + margin`, starting `REGRESSION_TOP_DB` below the peak.
fn fit_decay(times: &[f64], levels: &[f64], noise_db: f64) -> Option<(f64, f64)> {
    let (peak_i, &peak) = levels
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    let top = peak - REGRESSION_TOP_DB;
    let bottom = noise_db + REGRESSION_MARGIN_DB;
    if top <= bottom {
        return None;
    }
    let mut pts = Vec::new();
    for i in peak_i..levels.len() {
        if levels[i] < bottom {
            break;
        }
        if levels[i] <= top {
            pts.push((times[i], levels[i]));
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((ml - slope * mt, slope))
}

/// Iterative Lundeby estimate of reverberation time, noise floor and the
/// crosspoint where the decay meets the noise.
pub fn lundeby(x: &SignalBuffer) -> Result<LundebyEstimate> {
    let fs = x.sample_rate() as f64;
    let n = x.len();
    let first = (INITIAL_INTERVAL_S * fs).round().max(1.0) as usize;
    if n < first {
        return Err(RirError::invalid("Lundeby analysis needs at least 10 ms of signal"));
    }
    let e: Vec<f64> = x.samples().iter().map(|v| v * v).collect();
    let duration = n as f64 / fs;
    let mean_from = |start: usize| -> f64 {
        let s = &e[start.min(n - 1)..];
        s.iter().sum::<f64>() / s.len() as f64
    };

    let tail_start = ((1.0 - TAIL_FRACTION) * n as f64) as usize;
    let mut noise_db = db(mean_from(tail_start));
    let (times, levels) = envelope(&e, first, fs);
    let Some((mut a, mut b)) = fit_decay(&times, &levels, noise_db) else {
        return Ok(LundebyEstimate::failed(noise_db, 0));
    };
    if b >= 0.0 {
        return Ok(LundebyEstimate::failed(noise_db, 0));
    }
    let mut cross = (noise_db - a) / b;
    if !(cross > 0.0 && cross < duration) {
        return Ok(LundebyEstimate::failed(noise_db, 0));
    }

    let mut iterations = 0;
    for it in 1..=MAX_ITERATIONS {
        iterations = it;
        let rt = -60.0 / b;
        let len = ((rt / 30.0).clamp(MIN_INTERVAL_S, MAX_INTERVAL_S) * fs).round().max(1.0) as usize;
        let shifted = cross + NOISE_SHIFT_DB / -b;
        let start = ((shifted * fs) as usize).min(tail_start);
        noise_db = db(mean_from(start));
        let (times, levels) = envelope(&e, len, fs);
        let Some((a2, b2)) = fit_decay(&times, &levels, noise_db) else {
            return Ok(LundebyEstimate::failed(noise_db, it));
        };
        if b2 >= 0.0 {
            return Ok(LundebyEstimate::failed(noise_db, it));
        }
        let next = (noise_db - a2) / b2;
        if !(next > 0.0 && next < duration) {
            return Ok(LundebyEstimate::failed(noise_db, it));
        }
        let moved = (next - cross).abs();
        a = a2;
        b = b2;
        cross = next;
        if moved < len as f64 / fs {
            break;
        }
    }
    let truncation_index = ((cross * fs).round() as usize).min(n - 1);
    Ok(LundebyEstimate {
        rt_seconds: -60.0 / b,
        noise_floor_db: noise_db,
        truncation_index,
        converged: true,
        level_at_truncation_db: a + b * truncation_index as f64 / fs,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandTruncation {
    pub estimate: LundebyEstimate,
    /// The band after splicing, or the untouched band if the estimate failed.
    pub signal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncShapeResult {
    pub output: SignalBuffer,
    pub bands: Vec<BandTruncation>,
    /// True only if every band produced a valid Lundeby estimate.
    pub success: bool,
}

/// Per band: keep the measurement up to the Lundeby crosspoint, then replace
/// it with band-limited Gaussian noise decaying at the estimated rate and
/// starting at the regression-line level. Hard splice, no crossfade.
pub fn trunc_shape(y: &SignalBuffer, plan: &BandPlan, seed: u64) -> Result<TruncShapeResult> {
    let fs = y.sample_rate();
    let n = y.len();
    let fb = Filterbank::new(plan, n, fs)?;
    let bands = fb.split(y.samples())?;
    let mut out = Vec::with_capacity(bands.len());
    let mut success = true;
    for (b, band) in bands.into_iter().enumerate() {
        let est = lundeby(&SignalBuffer::new(band.clone(), fs)?)?;
        if !est.converged {
            success = false;
            out.push(BandTruncation {
                estimate: est,
                signal: band,
            });
            continue;
        }
        let white = NoiseStream::with_stream(seed, b as u64).normal_vec(n);
        let shaped = fb.split(&white)?.swap_remove(b);
        let sd = (shaped.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let amp = 10f64.powf(est.level_at_truncation_db / 20.0) / sd.max(f64::MIN_POSITIVE);
        let lambda = DECAY_CONSTANT / (est.rt_seconds * fs as f64);
        let k0 = est.truncation_index;
        let mut signal = band;
        for k in k0..n {
            signal[k] = amp * (-lambda * (k - k0) as f64).exp() * shaped[k];
        }
        out.push(BandTruncation {
            estimate: est,
            signal,
        });
    }
    let merged = fb.merge(&out.iter().map(|b| b.signal.clone()).collect::<Vec<_>>())?;
    Ok(TruncShapeResult {
        output: SignalBuffer::new(merged, fs)?,
        bands: out,
        success,
    })
}

fn check_mle(y: &SignalBuffer, op: &ConvOperator, sigma_n: f64) -> Result<()> {
    check_len(op.output_len(), y.len())?;
    if !(sigma_n > 0.0) || !sigma_n.is_finite() {
        return Err(RirError::invalid("sigma_n must be positive"));
    }
    Ok(())
}

fn unknown_len(y: &SignalBuffer, h: &SignalBuffer) -> Result<usize> {
    if h.len() > y.len() {
        return Err(RirError::invalid("measurement is shorter than the excitation"));
    }
    Ok(y.len() + 1 - h.len())
}

/// Data-only least squares, `(HᵀH + 1e−8·I) x = Hᵀy`, solved by CG.
pub fn mle_l2_deconv(
    y: &SignalBuffer,
    h: &SignalBuffer,
    sigma_n: f64,
    tol: &SolverTolerances,
) -> Result<SignalBuffer> {
    let op = ConvOperator::new(h, unknown_len(y, h)?)?;
    check_mle(y, &op, sigma_n)?;
    let x = l2_solve(&op, y.samples(), tol)?;
    SignalBuffer::new(x, y.sample_rate())
}

fn l2_solve(op: &ConvOperator, y: &[f64], tol: &SolverTolerances) -> Result<Vec<f64>> {
    let rhs = op.adjoint(y);
    let mut x = vec![0.0; op.input_len()];
    let apply = |v: &[f64]| {
        let mut g = op.gram(v);
        g.iter_mut().zip(v).for_each(|(g, v)| *g += MLE_SHIFT * v);
        g
    };
    let circ = match tol.preconditioner {
        crate::refine::Preconditioner::Circulant => op.circulant(),
        crate::refine::Preconditioner::None => None,
    };
    let pre = circ.as_ref().map(|c| move |v: &[f64]| c.solve_shifted(v, MLE_SHIFT, 1.0));
    let pre_ref: Option<&dyn Fn(&[f64]) -> Vec<f64>> = match &pre {
        Some(p) => Some(p),
        None => None,
    };
    conjugate_gradient(&apply, &rhs, &mut x, pre_ref, tol.cg_rel_tol, tol.cg_max_iter)?;
    Ok(x)
}

/// Data-only Huber fit by IRLS, started from the least-squares solution.
pub fn mle_huber_deconv(
    y: &SignalBuffer,
    h: &SignalBuffer,
    sigma_n: f64,
    laplace_b: f64,
    tol: &SolverTolerances,
) -> Result<(SignalBuffer, RefineDiagnostics)> {
    let op = ConvOperator::new(h, unknown_len(y, h)?)?;
    check_mle(y, &op, sigma_n)?;
    if !(laplace_b > 0.0) || !laplace_b.is_finite() {
        return Err(RirError::invalid("Laplace scale b must be positive"));
    }
    let mut x = l2_solve(&op, y.samples(), tol)?;
    let zeros = vec![0.0; x.len()];
    // weights expressed in units of σ⁻² so the shift matches the L2 solver
    let problem = HuberProblem {
        op: &op,
        y: y.samples(),
        prior_mean: &zeros,
        prior_precision: MLE_SHIFT,
        sigma_n,
        laplace_b,
        weight_scale: sigma_n * sigma_n,
    };
    let mut diag = RefineDiagnostics::default();
    problem.solve(&mut x, tol, &mut diag)?;
    Ok((SignalBuffer::new(x, y.sample_rate())?, diag))
}

/// Data-only declipping by damped Gauss–Newton from zero.
pub fn mle_declip_gn(
    y: &SignalBuffer,
    h: &SignalBuffer,
    clip: &ClipSpec,
    sigma_n: f64,
    tol: &SolverTolerances,
) -> Result<(SignalBuffer, RefineDiagnostics)> {
    let op = ConvOperator::new(h, unknown_len(y, h)?)?;
    check_mle(y, &op, sigma_n)?;
    let n = op.input_len();
    let zeros = vec![0.0; n];
    let problem = DeclipProblem {
        op: &op,
        clip,
        y: y.samples(),
        prior_mean: &zeros,
        prior_precision: MLE_SHIFT,
        data_scale: 1.0,
    };
    let mut x = vec![0.0; n];
    let mut diag = RefineDiagnostics::default();
    problem.solve(&mut x, tol, &mut diag)?;
    Ok((SignalBuffer::new(x, y.sample_rate())?, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::st_nmse;
    use crate::forward_ops::ess_sweep;
    use crate::signal::{noise_sigma_from_snr, synth_rir, SnrMode};
    use crate::testutil::*;

    fn buf(v: Vec<f64>) -> SignalBuffer {
        SignalBuffer::new(v, 8000).unwrap()
    }

    fn add_noise(x: &SignalBuffer, sigma: f64, seed: u64) -> SignalBuffer {
        let mut rng = NoiseStream::with_stream(seed, 7);
        buf(x.samples().iter().map(|v| v + sigma * rng.standard_normal()).collect())
    }

    #[test]
    fn lundeby_noiseless_rt() {
        for seed in 0..5 {
            let x = synth_rir(0.5, 1.0, 12000, 8000, seed).unwrap();
            let est = lundeby(&x).unwrap();
            assert!(est.converged);
            assert!((est.rt_seconds / 0.5 - 1.0).abs() < 0.1, "{est:?}");
        }
    }

    #[test]
    fn lundeby_rejects_white_noise() {
        for seed in 0..5 {
            let x = buf(NoiseStream::new(seed).normal_vec(8000));
            assert!(!lundeby(&x).unwrap().converged);
        }
        assert!(lundeby(&buf(vec![1.0; 10])).is_err());
    }

    #[test]
    fn lundeby_crosspoint_near_truth() {
        let n = 12000;
        for seed in 0..5 {
            let x = synth_rir(0.5, 1.0, n, 8000, 20 + seed).unwrap();
            let sigma = noise_sigma_from_snr(&x, 40.0, SnrMode::Early50ms).unwrap();
            let y = add_noise(&x, sigma, seed);
            let est = lundeby(&y).unwrap();
            assert!(est.converged);
            let lambda = crate::signal::rt_to_lambda(0.5, 8000);
            let truth = (1.0 / (sigma * sigma)).ln() / (2.0 * lambda);
            let gap = truth - est.truncation_index as f64;
            assert!(gap.abs() <= 0.2 * n as f64, "truth {truth} est {}", est.truncation_index);
        }
    }

    #[test]
    fn trunc_shape_keeps_pre_truncation_samples() {
        let x = synth_rir(0.4, 1.0, 8000, 8000, 3).unwrap();
        let sigma = noise_sigma_from_snr(&x, 30.0, SnrMode::Early50ms).unwrap();
        let y = add_noise(&x, sigma, 3);
        let plan = BandPlan::octave_default(8000).unwrap();
        let fb = Filterbank::new(&plan, 8000, 8000).unwrap();
        let bands = fb.split(y.samples()).unwrap();
        let r = trunc_shape(&y, &plan, 11).unwrap();
        for (b, bt) in r.bands.iter().enumerate() {
            let k0 = if bt.estimate.converged { bt.estimate.truncation_index } else { 8000 };
            assert_eq!(&bt.signal[..k0], &bands[b][..k0]);
        }
        assert_eq!(r.output, trunc_shape(&y, &plan, 11).unwrap().output);
    }

    #[test]
    fn trunc_shape_improves_noisy_input() {
        let plan = BandPlan::octave_default(8000).unwrap();
        let mut wins = 0;
        for seed in 0..10 {
            let x = synth_rir(0.6, 1.0, 12000, 8000, 40 + seed).unwrap();
            let sigma = noise_sigma_from_snr(&x, 30.0, SnrMode::Early50ms).unwrap();
            let y = add_noise(&x, sigma, seed);
            let r = trunc_shape(&y, &plan, seed).unwrap();
            if st_nmse(&x, &r.output).unwrap().avg < st_nmse(&x, &y).unwrap().avg {
                wins += 1;
            }
        }
        assert!(wins >= 8, "{wins}/10");
    }

    fn tight() -> SolverTolerances {
        SolverTolerances {
            cg_rel_tol: 1e-12,
            cg_max_iter: 5000,
            preconditioner: crate::refine::Preconditioner::Circulant,
            ..Default::default()
        }
    }

    #[test]
    fn mle_l2_cases() {
        let y = buf(vec![1.0, -2.0, 3.0]);
        let x = mle_l2_deconv(&y, &buf(vec![1.0]), 0.1, &tight()).unwrap();
        assert!(rel_err(x.samples(), y.samples()) < 1e-7);

        let mut rng = NoiseStream::new(1);
        let h = rng.normal_vec(9);
        let yv = rng.normal_vec(56);
        let x = mle_l2_deconv(&buf(yv.clone()), &buf(h.clone()), 0.1, &tight()).unwrap();
        let a = conv_matrix(&h, 48);
        let mut ata = vec![vec![0.0; 48]; 48];
        for row in &a {
            for i in 0..48 {
                for j in 0..48 {
                    ata[i][j] += row[i] * row[j];
                }
            }
        }
        for (i, r) in ata.iter_mut().enumerate() {
            r[i] += MLE_SHIFT;
        }
        let oracle = solve_dense(ata, matvec_t(&a, &yv));
        assert!(rel_err(x.samples(), &oracle) <= 1e-5);
    }

    #[test]
    fn mle_l2_noiseless_sweep() {
        let sweep = ess_sweep(0.25, 20.0, 3800.0, 8000).unwrap();
        let x = synth_rir(0.3, 1.0, 1000, 8000, 2).unwrap();
        let op = ConvOperator::new(&sweep, 1000).unwrap();
        let y = buf(op.apply(x.samples()));
        let est = mle_l2_deconv(&y, &sweep, 1e-3, &tight()).unwrap();
        assert!(rel_err(est.samples(), x.samples()) <= 1e-3);
    }

    #[test]
    fn mle_huber_quadratic_regime_equals_l2() {
        let mut rng = NoiseStream::new(2);
        let h = rng.normal_vec(7);
        let x = rng.normal_vec(60);
        let op = ConvOperator::from_slice(&h, 60).unwrap();
        let y: Vec<f64> = op.apply(&x).iter().map(|v| v + 1e-3 * rng.standard_normal()).collect();
        let (yb, hb) = (buf(y), buf(h));
        let l2 = mle_l2_deconv(&yb, &hb, 0.1, &tight()).unwrap();
        let (hub, _) = mle_huber_deconv(&yb, &hb, 0.1, 0.01, &tight()).unwrap();
        assert!(rel_err(hub.samples(), l2.samples()) <= 1e-6);
    }

    #[test]
    fn mle_huber_resists_spikes() {
        let sweep = ess_sweep(0.1, 20.0, 3800.0, 8000).unwrap();
        let mut wins = 0;
        for seed in 0..10 {
            let n = 600;
            let x = synth_rir(0.2, 1.0, n, 8000, 60 + seed).unwrap();
            let op = ConvOperator::new(&sweep, n).unwrap();
            let clean = op.apply(x.samples());
            let sigma = 0.01 * (clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64).sqrt();
            let mut rng = NoiseStream::with_stream(seed, 5);
            let y: Vec<f64> = clean
                .iter()
                .map(|v| {
                    let spike = if rng.uniform() < 0.01 { 50.0 * sigma * (2.0 * rng.uniform() - 1.0).signum() } else { 0.0 };
                    v + sigma * rng.standard_normal() + spike
                })
                .collect();
            let yb = buf(y);
            let tol = SolverTolerances { cg_rel_tol: 1e-8, ..tight() };
            let l2 = mle_l2_deconv(&yb, &sweep, sigma, &tol).unwrap();
            let (hub, _) = mle_huber_deconv(&yb, &sweep, sigma, sigma / 2f64.sqrt(), &tol).unwrap();
            if rel_err(hub.samples(), x.samples()) < rel_err(l2.samples(), x.samples()) {
                wins += 1;
            }
        }
        assert!(wins >= 9, "{wins}/10");
    }

    #[test]
    fn mle_declip_linear_limit_and_monotone() {
        let mut rng = NoiseStream::new(3);
        let h = rng.normal_vec(8);
        let x = rng.normal_vec(50);
        let op = ConvOperator::from_slice(&h, 50).unwrap();
        let y = buf(op.apply(&x).iter().map(|v| v + 1e-3 * rng.standard_normal()).collect());
        let hb = buf(h);
        let clip = ClipSpec::new(1.0, 1000.0, 1e4).unwrap();
        let tol = SolverTolerances { gn_iters: 20, ..tight() };
        let l2 = mle_l2_deconv(&y, &hb, 0.01, &tol).unwrap();
        let (dc, diag) = mle_declip_gn(&y, &hb, &clip, 0.01, &tol).unwrap();
        assert!(rel_err(dc.samples(), l2.samples()) <= 1e-4);
        assert!(diag.objective.windows(2).all(|w| w[1] <= w[0]));
        let (again, _) = mle_declip_gn(&y, &hb, &clip, 0.01, &tol).unwrap();
        assert_eq!(dc, again);
    }
}
