//! Analytic MMSE denoiser for exponentially decaying Gaussian RIRs.
//!
//! Given `x_t = t·x_1 + (1-t)·ε` with `x_1,k ~ N(0, α² e^{-2λk})`, the
//! conditional mean of `x_1` is a per-sample Wiener gain. The amplitude `α` is
//! profiled out by a least-squares fit of the noise-compensated energy decay
//! curve, and `λ` is averaged over a grid of reverberation times with weights
//! from the profile likelihood. All weights live in the log domain.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RirError};
use crate::filterbank::{BandPlan, FilterDesign, Filterbank};
use crate::signal::{backward_energy, rt_to_lambda, SignalBuffer};

/// Lower bound on the profiled squared amplitude.
pub const ALPHA_SQ_FLOOR: f64 = 1e-12;

/// Index sets longer than this are strided down to at most this many points.
pub const MAX_PROFILE_POINTS: usize = 16384;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Serializable description of a reverberation-time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub rt_min: f64,
    pub rt_max: f64,
    pub count: usize,
    /// Known amplitude `α²`; when set it replaces the profiled estimate.
    pub fixed_alpha_sq: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rt_min: 0.1,
            rt_max: 3.0,
            count: 60,
            fixed_alpha_sq: None,
        }
    }
}

impl GridSpec {
    pub fn build(&self, sample_rate: u32, n: usize) -> Result<DecayGrid> {
        let grid = DecayGrid::log_spaced(self.rt_min, self.rt_max, self.count, sample_rate, n)?;
        match self.fixed_alpha_sq {
            Some(a) => grid.with_fixed_alpha_sq(a),
            None => Ok(grid),
        }
    }
}

/// Reverberation-time grid with derived decay rates, log prior and cached bases
/// for one signal length.
#[derive(Debug, Clone)]
pub struct DecayGrid {
    pub rt_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub log_prior: Vec<f64>,
    sample_rate: u32,
    n: usize,
    /// profile index set (every `stride`-th sample)
    stride: usize,
    /// `e^{-2λk}` for every k, per grid point
    decay: Vec<Vec<f64>>,
    /// `ψ_λ(m)` on the profile index set, per grid point
    psi: Vec<Vec<f64>>,
    psi_sq_sum: Vec<f64>,
    fixed_alpha_sq: Option<f64>,
}

impl DecayGrid {
    /// `count` RT values spaced logarithmically over `[rt_min, rt_max]`, uniform prior.
    pub fn log_spaced(
        rt_min: f64,
        rt_max: f64,
        count: usize,
        sample_rate: u32,
        n: usize,
    ) -> Result<Self> {
        if count == 0 {
            return Err(RirError::config("decay grid needs at least one point"));
        }
        if !(rt_min > 0.0) || !(rt_max >= rt_min) {
            return Err(RirError::config("decay grid range must satisfy 0 < rt_min <= rt_max"));
        }
        let rts = if count == 1 {
            vec![rt_min]
        } else {
            let ratio = (rt_max / rt_min).ln() / (count - 1) as f64;
            (0..count)
                .map(|i| {
                    if i == count - 1 {
                        rt_max
                    } else {
                        rt_min * (ratio * i as f64).exp()
                    }
                })
                .collect()
        };
        Self::from_rt_values(rts, sample_rate, n)
    }

    pub fn from_rt_values(rt_values: Vec<f64>, sample_rate: u32, n: usize) -> Result<Self> {
        let count = rt_values.len();
        let log_prior = vec![-(count as f64).ln(); count];
        Self::with_log_prior(rt_values, log_prior, sample_rate, n)
    }

    /// Custom prior; it is renormalized in the log domain.
    pub fn with_log_prior(
        rt_values: Vec<f64>,
        mut log_prior: Vec<f64>,
        sample_rate: u32,
        n: usize,
    ) -> Result<Self> {
        if rt_values.is_empty() {
            return Err(RirError::config("decay grid needs at least one point"));
        }
        check_len(rt_values.len(), log_prior.len())?;
        if rt_values.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(RirError::config("grid RT values must be positive"));
        }
        if rt_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RirError::config("grid RT values must be strictly increasing"));
        }
        if n == 0 || sample_rate == 0 {
            return Err(RirError::invalid("grid needs a positive length and sample rate"));
        }
        let norm = logsumexp(&log_prior);
        if !norm.is_finite() {
            return Err(RirError::config("log prior does not normalize"));
        }
        log_prior.iter_mut().for_each(|v| *v -= norm);

        let stride = n.div_ceil(MAX_PROFILE_POINTS);
        let lambda_values: Vec<f64> = rt_values
            .iter()
            .map(|&rt| rt_to_lambda(rt, sample_rate))
            .collect();
        let mut decay = Vec::with_capacity(rt_values.len());
        let mut psi = Vec::with_capacity(rt_values.len());
        let mut psi_sq_sum = Vec::with_capacity(rt_values.len());
        for &lambda in &lambda_values {
            let d: Vec<f64> = (0..n).map(|k| (-2.0 * lambda * k as f64).exp()).collect();
            let full = backward_sum(&d);
            let sub: Vec<f64> = full.iter().step_by(stride).copied().collect();
            psi_sq_sum.push(sub.iter().map(|v| v * v).sum());
            psi.push(sub);
            decay.push(d);
        }
        Ok(Self {
            rt_values,
            lambda_values,
            log_prior,
            sample_rate,
            n,
            stride,
            decay,
            psi,
            psi_sq_sum,
            fixed_alpha_sq: None,
        })
    }

    /// Pins `α²` instead of profiling it from the signal.
    pub fn with_fixed_alpha_sq(mut self, alpha_sq: f64) -> Result<Self> {
        if !(alpha_sq > 0.0) || !alpha_sq.is_finite() {
            return Err(RirError::config("fixed alpha_sq must be positive"));
        }
        self.fixed_alpha_sq = Some(alpha_sq);
        Ok(self)
    }

    pub fn fixed_alpha_sq(&self) -> Option<f64> {
        self.fixed_alpha_sq
    }

    pub fn len(&self) -> usize {
        self.rt_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rt_values.is_empty()
    }

    pub fn signal_len(&self) -> usize {
        self.n
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn check_signal(&self, x: &[f64]) -> Result<()> {
        check_len(self.n, x.len())
    }
}

fn backward_sum(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut acc = 0.0;
    for (o, x) in out.iter_mut().zip(v).rev() {
        acc += x;
        *o = acc;
    }
    out
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior over the grid and the profiled amplitude at each grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayPosterior {
    pub log_weights: Vec<f64>,
    pub alpha_sq_profiled: Vec<f64>,
}

impl DecayPosterior {
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn mean_rt(&self, grid: &DecayGrid) -> f64 {
        self.weights()
            .iter()
            .zip(&grid.rt_values)
            .map(|(w, rt)| w * rt)
            .sum()
    }

    pub fn map_index(&self) -> usize {
        self.log_weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Diffusion noise seen by one band: the white `(1-t)²` scaled by the band's
/// share of the spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandNoiseModel {
    pub diffusion_var: f64,
}

impl BandNoiseModel {
    pub fn new(t: f64, bandwidth_fraction: f64) -> Self {
        Self {
            diffusion_var: bandwidth_fraction * (1.0 - t) * (1.0 - t),
        }
    }

    pub fn with_rule(t: f64, bandwidth_fraction: f64, rule: BandNoiseRule) -> Self {
        match rule {
            BandNoiseRule::Bandwidth => Self::new(t, bandwidth_fraction),
            BandNoiseRule::Full => Self::new(t, 1.0),
        }
    }
}

/// How the white diffusion variance `(1-t)²` is assigned to each band.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandNoiseRule {
    /// `bandwidth_fraction·(1-t)²`, the energy white noise actually puts in the band.
    #[default]
    Bandwidth,
    /// `(1-t)²` in every band, the single-band formula applied unchanged.
    Full,
}

/// `ψ_λ(m) = Σ_{k=m}^{n-1} e^{-2λk}` by a single backward pass.
pub fn psi_basis(lambda: f64, n: usize) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(RirError::invalid("lambda must be positive"));
    }
    if n == 0 {
        return Err(RirError::invalid("basis length must be at least 1"));
    }
    let d: Vec<f64> = (0..n).map(|k| (-2.0 * lambda * k as f64).exp()).collect();
    Ok(backward_sum(&d))
}

/// Closed-form least-squares amplitude `α̂²` fitting `t²·s·ψ` to the
/// noise-compensated EDC. Negative EDC entries are treated as zero and the
/// result is floored at [`ALPHA_SQ_FLOOR`].
pub fn profile_alpha_sq(edc_sig: &[f64], psi: &[f64], t: f64) -> Result<f64> {
    check_len(psi.len(), edc_sig.len())?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(RirError::invalid("profiling requires t in (0, 1]"));
    }
    let den: f64 = psi.iter().map(|p| p * p).sum();
    if den == 0.0 {
        return Err(RirError::invalid("basis is identically zero"));
    }
    let num: f64 = psi.iter().zip(edc_sig).map(|(p, e)| p * e.max(0.0)).sum();
    Ok(alpha_from_sums(num, den, t))
}

fn alpha_from_sums(num: f64, psi_sq_sum: f64, t: f64) -> f64 {
    let raw = num / (t * t * psi_sq_sum);
    if raw.is_finite() {
        raw.max(ALPHA_SQ_FLOOR)
    } else {
        ALPHA_SQ_FLOOR
    }
}

/// `EDC_obs(m) − noise_var·(n − m)`, clamped at zero.
pub fn noise_compensated_edc(x: &[f64], noise_var: f64) -> Vec<f64> {
    let n = x.len();
    backward_energy(x)
        .into_iter()
        .enumerate()
        .map(|(m, e)| (e - noise_var * (n - m) as f64).max(0.0))
        .collect()
}

/// Gaussian log-likelihood of `x_t` under per-sample variance
/// `t²·α²·e^{-2λk} + noise_var`.
pub fn profile_log_likelihood(
    x_t: &SignalBuffer,
    lambda: f64,
    alpha_sq: f64,
    t: f64,
    noise_var: f64,
) -> Result<f64> {
    if !(alpha_sq > 0.0) {
        return Err(RirError::invalid("alpha_sq must be positive"));
    }
    if !(noise_var >= 0.0) {
        return Err(RirError::invalid("noise variance must be non-negative"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(RirError::invalid("t must lie in [0, 1]"));
    }
    let scale = t * t * alpha_sq;
    let mut ll = 0.0;
    for (k, &x) in x_t.samples().iter().enumerate() {
        let v = scale * (-2.0 * lambda * k as f64).exp() + noise_var;
        if !(v > 0.0) {
            return Err(RirError::Domain(format!("non-positive variance at sample {k}")));
        }
        ll += -0.5 * (LN_2PI + v.ln()) - x * x / (2.0 * v);
    }
    Ok(ll)
}

/// Posterior over the decay grid with `α` profiled out at every grid point.
pub fn lambda_posterior(
    x_t: &SignalBuffer,
    t: f64,
    grid: &DecayGrid,
    noise_var: f64,
) -> Result<DecayPosterior> {
    posterior_from_slice(x_t.samples(), t, grid, noise_var)
}

pub(crate) fn posterior_from_slice(
    x: &[f64],
    t: f64,
    grid: &DecayGrid,
    noise_var: f64,
) -> Result<DecayPosterior> {
    grid.check_signal(x)?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(RirError::invalid("decay posterior requires t in (0, 1]"));
    }
    if !(noise_var >= 0.0) {
        return Err(RirError::invalid("noise variance must be non-negative"));
    }
    let edc_sig: Vec<f64> = noise_compensated_edc(x, noise_var)
        .into_iter()
        .step_by(grid.stride)
        .collect();
    let x_sq: Vec<f64> = x.iter().step_by(grid.stride).map(|v| v * v).collect();
    let t_sq = t * t;

    let mut alpha_sq_profiled = Vec::with_capacity(grid.len());
    let mut log_post = Vec::with_capacity(grid.len());
    for l in 0..grid.len() {
        let alpha_sq = match grid.fixed_alpha_sq {
            Some(a) => a,
            None => {
                let num: f64 = grid.psi[l].iter().zip(&edc_sig).map(|(p, e)| p * e).sum();
                alpha_from_sums(num, grid.psi_sq_sum[l], t)
            }
        };
        let scale = t_sq * alpha_sq;
        let decay = &grid.decay[l];
        let mut ll = 0.0;
        for (i, &xs) in x_sq.iter().enumerate() {
            let v = scale * decay[i * grid.stride] + noise_var;
            if !(v > 0.0) {
                return Err(RirError::Domain(format!(
                    "non-positive variance at sample {} for grid point {l}",
                    i * grid.stride
                )));
            }
            ll -= 0.5 * (v.ln() + xs / v);
        }
        // the 2π term is common to all grid points and cancels in the softmax
        alpha_sq_profiled.push(alpha_sq);
        log_post.push(ll + grid.log_prior[l]);
    }
    let norm = logsumexp(&log_post);
    let log_weights = log_post.iter().map(|v| v - norm).collect();
    Ok(DecayPosterior {
        log_weights,
        alpha_sq_profiled,
    })
}

/// Per-sample Wiener shrinkage `t·d / (t²·d + noise_var)`.
#[inline]
pub fn shrinkage(d: f64, t: f64, noise_var: f64) -> f64 {
    let den = t * t * d + noise_var;
    if den > 0.0 {
        t * d / den
    } else {
        1.0 / t
    }
}

/// Posterior-averaged per-sample gain. `None` means the identity (t = 1, no noise).
pub(crate) fn denoise_gain(
    x: &[f64],
    t: f64,
    grid: &DecayGrid,
    noise_var: f64,
) -> Result<Option<(Vec<f64>, DecayPosterior)>> {
    grid.check_signal(x)?;
    let post = posterior_from_slice(x, t, grid, noise_var)?;
    if t == 1.0 && noise_var == 0.0 {
        return Ok(None);
    }
    let weights = post.weights();
    let w_max = weights.iter().copied().fold(0.0, f64::max);
    let kept: Vec<usize> = (0..grid.len())
        .filter(|&l| weights[l] > w_max * 1e-18)
        .collect();
    let w_sum: f64 = kept.iter().map(|&l| weights[l]).sum();
    let mut gain = vec![0.0; x.len()];
    for &l in &kept {
        let w = weights[l] / w_sum;
        let a = post.alpha_sq_profiled[l];
        for (g, &e) in gain.iter_mut().zip(&grid.decay[l]) {
            *g += w * shrinkage(a * e, t, noise_var);
        }
    }
    Ok(Some((gain, post)))
}

pub(crate) fn denoise_slice(x: &[f64], t: f64, grid: &DecayGrid, noise_var: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(RirError::invalid("t must lie in [0, 1]"));
    }
    grid.check_signal(x)?;
    if t == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(match denoise_gain(x, t, grid, noise_var)? {
        None => x.to_vec(),
        Some((gain, _)) => x.iter().zip(&gain).map(|(v, g)| v * g).collect(),
    })
}

/// MMSE estimate of the clean RIR from `x_t`.
pub fn denoise(x_t: &SignalBuffer, t: f64, grid: &DecayGrid, noise_var: f64) -> Result<SignalBuffer> {
    x_t.with_samples(denoise_slice(x_t.samples(), t, grid, noise_var)?)
}

/// `(D_t(x_t) − x_t) / (1 − t)`.
pub fn vector_field(
    x_t: &SignalBuffer,
    t: f64,
    grid: &DecayGrid,
    noise_var: f64,
) -> Result<SignalBuffer> {
    if t >= 1.0 {
        return Err(RirError::Domain("vector field is undefined at t = 1".into()));
    }
    let d = denoise_slice(x_t.samples(), t, grid, noise_var)?;
    let v = d
        .iter()
        .zip(x_t.samples())
        .map(|(d, x)| (d - x) / (1.0 - t))
        .collect();
    x_t.with_samples(v)
}

/// Band-wise denoiser: split, denoise each band with its share of the
/// diffusion noise, merge. Holds the filterbank and grid for reuse across steps.
#[derive(Debug, Clone)]
pub struct MultibandDenoiser {
    filterbank: Filterbank,
    grid: DecayGrid,
    fractions: Vec<f64>,
    rule: BandNoiseRule,
}

impl MultibandDenoiser {
    pub fn new(plan: &BandPlan, grid: DecayGrid) -> Result<Self> {
        Self::with_design(plan, grid, FilterDesign::BrickWall)
    }

    /// With a non-brick-wall design the noise share of each band is the
    /// energy its filter passes rather than its nominal bandwidth fraction.
    pub fn with_design(plan: &BandPlan, grid: DecayGrid, design: FilterDesign) -> Result<Self> {
        let filterbank =
            Filterbank::with_design(plan, grid.signal_len(), grid.sample_rate(), design)?;
        let fractions = match design {
            FilterDesign::BrickWall => plan.bandwidth_fractions.clone(),
            FilterDesign::Smooth { .. } => filterbank.bin_fractions(),
        };
        Ok(Self {
            filterbank,
            grid,
            fractions,
            rule: BandNoiseRule::default(),
        })
    }

    pub fn with_noise_rule(mut self, rule: BandNoiseRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn noise_rule(&self) -> BandNoiseRule {
        self.rule
    }

    pub fn grid(&self) -> &DecayGrid {
        &self.grid
    }

    pub fn plan(&self) -> &BandPlan {
        self.filterbank.plan()
    }

    pub fn denoise(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(RirError::invalid("t must lie in [0, 1]"));
        }
        check_len(self.grid.signal_len(), x.len())?;
        if t == 0.0 {
            return Ok(vec![0.0; x.len()]);
        }
        if self.fractions.len() == 1 {
            return denoise_slice(x, t, &self.grid, (1.0 - t) * (1.0 - t));
        }
        let bands = self.filterbank.split(x)?;
        let mut out = Vec::with_capacity(bands.len());
        for (band, &frac) in bands.iter().zip(&self.fractions) {
            let nv = BandNoiseModel::with_rule(t, frac, self.rule).diffusion_var;
            out.push(denoise_slice(band, t, &self.grid, nv)?);
        }
        self.filterbank.merge(&out)
    }

    /// Per-band posteriors at time `t` (band-scaled noise), for diagnostics.
    pub fn band_posteriors(&self, x: &[f64], t: f64) -> Result<Vec<DecayPosterior>> {
        let bands = self.filterbank.split(x)?;
        bands
            .iter()
            .zip(&self.fractions)
            .map(|(band, &frac)| {
                posterior_from_slice(band, t, &self.grid, BandNoiseModel::with_rule(t, frac, self.rule).diffusion_var)
            })
            .collect()
    }
}

pub fn denoise_multiband(
    x_t: &SignalBuffer,
    t: f64,
    plan: &BandPlan,
    grid: &DecayGrid,
) -> Result<SignalBuffer> {
    let d = MultibandDenoiser::new(plan, grid.clone())?;
    x_t.with_samples(d.denoise(x_t.samples(), t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;
    use crate::signal::synth_rir;

    fn buf(v: Vec<f64>) -> SignalBuffer {
        SignalBuffer::new(v, 8000).unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = GridSpec::default().build(8000, 100).unwrap();
        assert_eq!(g.len(), 60);
        assert!((g.rt_values[0] - 0.1).abs() < 1e-15);
        assert_eq!(*g.rt_values.last().unwrap(), 3.0);
        assert!(g.rt_values.windows(2).all(|w| w[1] > w[0]));
        for (rt, l) in g.rt_values.iter().zip(&g.lambda_values) {
            assert_eq!(*l, 6.90 / (rt * 8000.0));
        }
        assert!(logsumexp(&g.log_prior).abs() < 1e-12);
        assert!(DecayGrid::from_rt_values(vec![0.5, 0.4], 8000, 10).is_err());
        assert!(DecayGrid::log_spaced(0.1, 3.0, 0, 8000, 10).is_err());
    }

    #[test]
    fn long_signals_are_strided() {
        let g = DecayGrid::from_rt_values(vec![0.5], 8000, 40000).unwrap();
        assert_eq!(g.stride(), 3);
        assert!(g.psi[0].len() <= MAX_PROFILE_POINTS);
    }

    #[test]
    fn psi_examples() {
        let p = psi_basis(0.5, 4).unwrap();
        let mut direct = 0.0;
        for k in 0..4 {
            direct += (-(k as f64)).exp();
        }
        assert!((p[0] - direct).abs() < 1e-15);
        assert!((p[3] - (-3.0f64).exp()).abs() < 1e-15);
        // large λ: only the k = 0 term survives
        assert!((psi_basis(50.0, 10).unwrap()[0] - 1.0).abs() < 1e-15);
        // tiny λ: ψ(m) ≈ n − m
        let p = psi_basis(1e-12, 7).unwrap();
        for (m, v) in p.iter().enumerate() {
            assert!((v - (7 - m) as f64).abs() < 1e-9);
        }
        assert!(psi_basis(0.0, 4).is_err());
    }

    #[test]
    fn alpha_profile_exact_recovery_and_floor() {
        let psi = psi_basis(0.01, 50).unwrap();
        let (t, s) = (0.7, 2.5);
        let edc: Vec<f64> = psi.iter().map(|p| t * t * s * p).collect();
        assert!((profile_alpha_sq(&edc, &psi, t).unwrap() - s).abs() < 1e-12);
        let neg = vec![-1.0; 50];
        assert_eq!(profile_alpha_sq(&neg, &psi, t).unwrap(), ALPHA_SQ_FLOOR);
        assert!(profile_alpha_sq(&edc, &psi, 0.0).is_err());
    }

    #[test]
    fn alpha_profile_matches_normal_equation() {
        // scalar LS via the 1x1 normal equation (aᵀa) s = aᵀb with a = t²ψ
        let mut rng = NoiseStream::new(12);
        let psi = psi_basis(0.03, 64).unwrap();
        let edc: Vec<f64> = (0..64).map(|_| rng.uniform() * 10.0).collect();
        let t = 0.6;
        let a: Vec<f64> = psi.iter().map(|p| t * t * p).collect();
        let ata: f64 = a.iter().map(|v| v * v).sum();
        let atb: f64 = a.iter().zip(&edc).map(|(p, q)| p * q).sum();
        let oracle = atb / ata;
        let got = profile_alpha_sq(&edc, &psi, t).unwrap();
        assert!((got - oracle).abs() <= 1e-10 * oracle);
    }

    #[test]
    fn log_likelihood_examples() {
        let zero = buf(vec![0.0; 5]);
        // v_k = 1 everywhere: alpha_sq·t² small and noise_var = 1 would not give exactly 1,
        // so use t = 0 to kill the signal term
        let ll = profile_log_likelihood(&zero, 0.1, 1.0, 0.0, 1.0).unwrap();
        assert!((ll + 2.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let one = buf(vec![1.0]);
        let ll = profile_log_likelihood(&one, 0.1, 1.0, 0.0, 1.0).unwrap();
        assert!((ll - (-0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5)).abs() < 1e-12);
        assert!(profile_log_likelihood(&one, 0.1, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn log_likelihood_matches_per_sample_density() {
        let mut rng = NoiseStream::new(3);
        let x = buf(rng.normal_vec(8));
        let (lambda, a2, t, nv) = (0.2, 1.7, 0.4, 0.36);
        let mut oracle = 0.0;
        for (k, v) in x.samples().iter().enumerate() {
            let var = t * t * a2 * (-2.0 * lambda * k as f64).exp() + nv;
            let dens = (-v * v / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            oracle += dens.ln();
        }
        let got = profile_log_likelihood(&x, lambda, a2, t, nv).unwrap();
        assert!((got - oracle).abs() < 1e-10);
    }

    #[test]
    fn posterior_trivial_cases() {
        let x = buf(NoiseStream::new(1).normal_vec(64));
        // a one-sample signal only sees k = 0, where every λ gives the same model
        let g1 = DecayGrid::from_rt_values(vec![0.3, 0.6], 8000, 1).unwrap();
        let p = lambda_posterior(&buf(vec![0.8]), 0.5, &g1, 0.25).unwrap();
        let w = p.weights();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        let single = DecayGrid::from_rt_values(vec![0.7], 8000, 64).unwrap();
        let p = lambda_posterior(&x, 0.5, &single, 0.25).unwrap();
        assert!((p.weights()[0] - 1.0).abs() < 1e-15);
        let g = DecayGrid::from_rt_values(vec![0.3, 0.6], 8000, 64).unwrap();
        assert!(logsumexp(&lambda_posterior(&x, 0.5, &g, 0.25).unwrap().log_weights).abs() < 1e-12);
    }

    #[test]
    fn posterior_joint_scale_invariance() {
        let g = GridSpec::default().build(8000, 2000).unwrap();
        let clean = synth_rir(0.4, 1.0, 2000, 8000, 4).unwrap();
        let mut rng = NoiseStream::new(5);
        let t = 0.6;
        let xt: Vec<f64> = clean
            .samples()
            .iter()
            .map(|v| t * v + (1.0 - t) * rng.standard_normal())
            .collect();
        let nv = (1.0 - t) * (1.0 - t);
        let s = 3.7;
        let a = lambda_posterior(&buf(xt.clone()), t, &g, nv).unwrap();
        let b = lambda_posterior(&buf(xt.iter().map(|v| v * s).collect()), t, &g, nv * s * s).unwrap();
        for (p, q) in a.weights().iter().zip(b.weights()) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
        assert_eq!(a.map_index(), b.map_index());
    }

    #[test]
    fn denoise_endpoints() {
        let g = GridSpec::default().build(8000, 128).unwrap();
        let x = buf(NoiseStream::new(8).normal_vec(128));
        assert_eq!(denoise(&x, 1.0, &g, 0.0).unwrap(), x);
        assert!(denoise(&x, 0.0, &g, 1.0)
            .unwrap()
            .samples()
            .iter()
            .all(|&v| v == 0.0));
        assert!(denoise(&x, 1.5, &g, 0.0).is_err());
    }

    #[test]
    fn single_point_grid_is_a_scalar_wiener_filter() {
        // with one grid point the gain is t·d̂/(t²d̂ + nv) with d̂ from the profiled α
        let rt = 0.5;
        let n = 4000;
        let g = DecayGrid::from_rt_values(vec![rt], 8000, n).unwrap();
        let clean = synth_rir(rt, 1.0, n, 8000, 21).unwrap();
        let mut rng = NoiseStream::new(22);
        let t = 0.4;
        let nv = (1.0 - t) * (1.0 - t);
        let xt = buf(clean
            .samples()
            .iter()
            .map(|v| t * v + (1.0 - t) * rng.standard_normal())
            .collect());
        let post = lambda_posterior(&xt, t, &g, nv).unwrap();
        let a2 = post.alpha_sq_profiled[0];
        let lambda = g.lambda_values[0];
        let out = denoise(&xt, t, &g, nv).unwrap();
        for k in 0..n {
            let d = a2 * (-2.0 * lambda * k as f64).exp();
            let gain = t * d / (t * t * d + (1.0 - t) * (1.0 - t));
            assert!((out.samples()[k] - gain * xt.samples()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn vector_field_duality_and_endpoints() {
        let g = GridSpec::default().build(8000, 256).unwrap();
        let x = buf(NoiseStream::new(30).normal_vec(256));
        let v0 = vector_field(&x, 0.0, &g, 1.0).unwrap();
        for (v, xv) in v0.samples().iter().zip(x.samples()) {
            assert_eq!(*v, -xv);
        }
        assert!(vector_field(&x, 1.0, &g, 0.0).is_err());
        for &t in &[0.1, 0.5, 0.93] {
            let nv = (1.0 - t) * (1.0 - t);
            let v = vector_field(&x, t, &g, nv).unwrap();
            let d = denoise(&x, t, &g, nv).unwrap();
            for k in 0..256 {
                let lhs = x.samples()[k] + (1.0 - t) * v.samples()[k];
                assert!((lhs - d.samples()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn signal_gain_monotone_in_t() {
        // β itself overshoots 1 near t = 1/√(1+d); t·β = snr/(1+snr) does not.
        for &d in &[1e-6, 1e-2, 1.0, 50.0] {
            let mut prev = 0.0;
            for i in 0..=200 {
                let t = i as f64 / 200.0;
                let g = t * shrinkage(d, t, (1.0 - t) * (1.0 - t));
                assert!(g >= prev - 1e-15, "d {d} t {t}");
                assert!(g <= 1.0 + 1e-15);
                prev = g;
            }
            let peak = 1.0 / (1.0 + d).sqrt();
            let b = shrinkage(d, peak, (1.0 - peak).powi(2));
            assert!(b >= 1.0 && b >= shrinkage(d, 1.0, 0.0));
        }
    }

    #[test]
    fn gain_bounds_hold() {
        let n = 512;
        let g = GridSpec::default().build(8000, n).unwrap();
        let clean = synth_rir(0.3, 1.0, n, 8000, 2).unwrap();
        let mut rng = NoiseStream::new(9);
        for &t in &[0.05, 0.3, 0.7, 0.99] {
            let nv = (1.0 - t) * (1.0 - t);
            let xt: Vec<f64> = clean
                .samples()
                .iter()
                .map(|v| t * v + (1.0 - t) * rng.standard_normal())
                .collect();
            let (gain, post) = denoise_gain(&xt, t, &g, nv).unwrap().unwrap();
            let w = post.weights();
            for (k, &gk) in gain.iter().enumerate() {
                assert!(gk >= 0.0);
                assert!(gk <= 1.0 / t + 1e-12);
                // gain ≤ 1 wherever every grid point satisfies nv ≥ t(1−t)d̂_k
                let all_small = (0..g.len()).all(|l| {
                    w[l] == 0.0
                        || nv >= t * (1.0 - t) * post.alpha_sq_profiled[l] * g.decay[l][k]
                });
                if all_small {
                    assert!(gk <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn posterior_tracks_true_rt() {
        let t = 0.99;
        let n = 8000;
        let g = GridSpec::default().build(8000, n).unwrap();
        let mut acc = 0.0;
        for seed in 0..20 {
            let clean = synth_rir(0.5, 1.0, n, 8000, 500 + seed).unwrap();
            let mut rng = NoiseStream::with_stream(seed, 99);
            let xt = buf(clean
                .samples()
                .iter()
                .map(|v| t * v + (1.0 - t) * rng.standard_normal())
                .collect());
            let post = lambda_posterior(&xt, t, &g, (1.0 - t) * (1.0 - t)).unwrap();
            acc += post.mean_rt(&g);
        }
        let mean = acc / 20.0;
        assert!((mean / 0.5 - 1.0).abs() < 0.10, "mean RT {mean}");
    }

    #[test]
    fn multiband_all_pass_matches_single_band() {
        let n = 600;
        let g = GridSpec::default().build(8000, n).unwrap();
        let x = buf(NoiseStream::new(77).normal_vec(n));
        let t = 0.45;
        let a = denoise_multiband(&x, t, &BandPlan::all_pass(8000), &g).unwrap();
        let b = denoise(&x, t, &g, (1.0 - t) * (1.0 - t)).unwrap();
        for (p, q) in a.samples().iter().zip(b.samples()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn multiband_identity_at_t1() {
        let n = 300;
        let g = GridSpec::default().build(8000, n).unwrap();
        let x = buf(NoiseStream::new(78).normal_vec(n));
        let y = denoise_multiband(&x, 1.0, &BandPlan::octave_default(8000).unwrap(), &g).unwrap();
        for (p, q) in x.samples().iter().zip(y.samples()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
