//! Measurement-aware refinement: the proximal mean `μ` and the
//! covariance-shaped perturbation `κ` for each measurement model.
//!
//! Every solve works on a system of the form `p·I + Hᵀ W H`, where `p` is the
//! prior precision `ν⁻²` and `W` a scalar or diagonal data weight.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RirError};
use crate::forward_ops::{
    soft_clip_deriv_scalar, soft_clip_scalar, CirculantGram, ClipSpec, LinearOperator,
    MaskOperator,
};
use crate::rng::NoiseStream;
use crate::signal::SignalBuffer;
use crate::solver::{conjugate_gradient, norm, CgStats};

/// Optional preconditioner for the shifted normal equations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    /// `(p + w̄·|H(f)|²)⁻¹` on the zero-padded FFT grid, `w̄` the mean data weight.
    /// Default: with a sweep excitation plain CG stalls around 1e-7.
    #[default]
    Circulant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverTolerances {
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
    pub irls_iters: usize,
    pub gn_iters: usize,
    pub gn_damping: f64,
    /// Relative CG tolerance inside Gauss–Newton steps and for the declipping
    /// perturbation. A truncated step is still a descent direction.
    pub gn_cg_rel_tol: f64,
    pub preconditioner: Preconditioner,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self {
            cg_rel_tol: 1e-8,
            cg_max_iter: 500,
            irls_iters: 10,
            gn_iters: 8,
            gn_damping: 1e-3,
            gn_cg_rel_tol: 1e-1,
            preconditioner: Preconditioner::Circulant,
        }
    }
}

impl SolverTolerances {
    fn gn_inner(&self) -> Self {
        Self {
            cg_rel_tol: self.gn_cg_rel_tol,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cg_rel_tol > 0.0 && self.cg_rel_tol < 1.0) {
            return Err(RirError::config("cg_rel_tol must lie in (0, 1)"));
        }
        if self.cg_max_iter == 0 || self.irls_iters == 0 || self.gn_iters == 0 {
            return Err(RirError::config("iteration limits must be positive"));
        }
        if !(self.gn_cg_rel_tol > 0.0 && self.gn_cg_rel_tol < 1.0) {
            return Err(RirError::config("gn_cg_rel_tol must lie in (0, 1)"));
        }
        if !(self.gn_damping > 0.0) || !self.gn_damping.is_finite() {
            return Err(RirError::config("gn_damping must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineDiagnostics {
    /// CG iterations summed over every solve in this refinement.
    pub cg_iterations: usize,
    pub cg_solves: usize,
    /// Largest final relative residual among the CG solves.
    pub max_relative_residual: f64,
    /// IRLS or Gauss–Newton iterations actually run.
    pub outer_iterations: usize,
    /// Objective before the first and after every outer iteration.
    pub objective: Vec<f64>,
    pub step_halvings: usize,
    /// Gauss–Newton could not decrease the objective within the halving budget.
    pub stalled: bool,
    /// CG runs that hit `cg_max_iter` and were kept as approximate solutions.
    pub inexact_solves: usize,
}

impl RefineDiagnostics {
    fn record(&mut self, s: CgStats) {
        self.cg_iterations += s.iterations;
        self.cg_solves += 1;
        self.max_relative_residual = self.max_relative_residual.max(s.relative_residual);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub mu: SignalBuffer,
    /// Zero when no random stream was supplied.
    pub kappa: SignalBuffer,
    pub diagnostics: RefineDiagnostics,
}

/// Huber penalty `ρ_δ(r)`.
pub fn huber_rho(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// IRLS weight: `σ⁻²` in the quadratic zone, `1/(b·|r|)` outside it.
pub fn huber_weight(r: f64, sigma_n: f64, laplace_b: f64) -> f64 {
    let delta = sigma_n * sigma_n / laplace_b;
    let a = r.abs();
    if a <= delta {
        1.0 / (sigma_n * sigma_n)
    } else {
        1.0 / (laplace_b * a.max(1e-10))
    }
}

fn check_params(sigma_n: f64, nu_t: f64) -> Result<()> {
    if !(sigma_n >= 0.0) || !sigma_n.is_finite() {
        return Err(RirError::invalid("sigma_n must be finite and non-negative"));
    }
    if !(nu_t >= 0.0) || !nu_t.is_finite() {
        return Err(RirError::invalid("nu_t must be finite and non-negative"));
    }
    if sigma_n == 0.0 && nu_t == 0.0 {
        return Err(RirError::invalid(
            "sigma_n and nu_t are both zero; the refinement is degenerate",
        ));
    }
    Ok(())
}

/// Precision-weighted average of one observation and one prior value, and the
/// matching perturbation. Zero deviations are treated as infinite precision.
#[inline]
fn fuse(y: f64, xh: f64, sigma_n: f64, nu_t: f64, e1: f64, e2: f64) -> (f64, f64) {
    if sigma_n == 0.0 {
        return (y, 0.0);
    }
    if nu_t == 0.0 {
        return (xh, 0.0);
    }
    let py = 1.0 / (sigma_n * sigma_n);
    let px = 1.0 / (nu_t * nu_t);
    let var = 1.0 / (py + px);
    (var * (py * y + px * xh), var * (e1 / nu_t + e2 / sigma_n))
}

fn finish(
    like: &SignalBuffer,
    mu: Vec<f64>,
    kappa: Vec<f64>,
    diagnostics: RefineDiagnostics,
) -> Result<RefineResult> {
    Ok(RefineResult {
        mu: like.with_samples(mu)?,
        kappa: like.with_samples(kappa)?,
        diagnostics,
    })
}

/// `H = I`: closed-form precision-weighted average.
pub fn refine_denoise(
    y: &SignalBuffer,
    x_hat: &SignalBuffer,
    sigma_n: f64,
    nu_t: f64,
    rng: Option<&mut NoiseStream>,
) -> Result<RefineResult> {
    check_len(x_hat.len(), y.len())?;
    check_params(sigma_n, nu_t)?;
    let n = y.len();
    let (e1, e2) = match rng {
        Some(r) => (r.normal_vec(n), r.normal_vec(n)),
        None => (vec![0.0; n], vec![0.0; n]),
    };
    let (mu, kappa): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| fuse(y.samples()[i], x_hat.samples()[i], sigma_n, nu_t, e1[i], e2[i]))
        .unzip();
    finish(x_hat, mu, kappa, RefineDiagnostics::default())
}

/// Diagonal sampling: observed samples fuse with the prior, missing ones keep it.
pub fn refine_inpaint(
    mask: &MaskOperator,
    y: &SignalBuffer,
    x_hat: &SignalBuffer,
    sigma_n: f64,
    nu_t: f64,
    rng: Option<&mut NoiseStream>,
) -> Result<RefineResult> {
    check_len(mask.keep.len(), y.len())?;
    check_len(mask.keep.len(), x_hat.len())?;
    check_params(sigma_n, nu_t)?;
    let n = y.len();
    let (e1, e2) = match rng {
        Some(r) => (r.normal_vec(n), r.normal_vec(n)),
        None => (vec![0.0; n], vec![0.0; n]),
    };
    let (mu, kappa): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| {
            let xh = x_hat.samples()[i];
            if mask.keep[i] {
                fuse(y.samples()[i], xh, sigma_n, nu_t, e1[i], e2[i])
            } else {
                (xh, nu_t * e1[i])
            }
        })
        .unzip();
    finish(x_hat, mu, kappa, RefineDiagnostics::default())
}

enum Weights {
    Scalar(f64),
    Diag(Vec<f64>),
}

impl Weights {
    /// Collapses constant weights to the scalar form.
    fn from_vec(w: Vec<f64>) -> Self {
        match w.first() {
            Some(&w0) if w.iter().all(|&v| v == w0) => Weights::Scalar(w0),
            _ => Weights::Diag(w),
        }
    }

    fn mean(&self) -> f64 {
        match self {
            Weights::Scalar(s) => *s,
            Weights::Diag(w) => w.iter().sum::<f64>() / w.len().max(1) as f64,
        }
    }

    fn sqrt_times(&self, v: &mut [f64]) {
        match self {
            Weights::Scalar(s) => {
                let r = s.sqrt();
                v.iter_mut().for_each(|x| *x *= r);
            }
            Weights::Diag(w) => v.iter_mut().zip(w).for_each(|(x, w)| *x *= w.sqrt()),
        }
    }

    fn times(&self, v: &mut [f64]) {
        match self {
            Weights::Scalar(s) => v.iter_mut().for_each(|x| *x *= s),
            Weights::Diag(w) => v.iter_mut().zip(w).for_each(|(x, w)| *x *= w),
        }
    }
}

/// `shift·I + Hᵀ W H`.
struct NormalSystem<'a> {
    op: &'a dyn LinearOperator,
    shift: f64,
    weights: Weights,
    circulant: Option<CirculantGram>,
    /// Whether κ sampling must converge; the nonlinear refinements relax this.
    exact_sampling: bool,
}

impl<'a> NormalSystem<'a> {
    fn new(
        op: &'a dyn LinearOperator,
        shift: f64,
        weights: Weights,
        tol: &SolverTolerances,
    ) -> Self {
        let circulant = match tol.preconditioner {
            Preconditioner::None => None,
            Preconditioner::Circulant => op.circulant(),
        };
        Self {
            op,
            shift,
            weights,
            circulant,
            exact_sampling: true,
        }
    }

    fn relaxed(mut self) -> Self {
        self.exact_sampling = false;
        self
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = match &self.weights {
            Weights::Scalar(s) => {
                let mut g = self.op.gram(x);
                g.iter_mut().for_each(|v| *v *= s);
                g
            }
            Weights::Diag(w) => {
                let mut hx = self.op.apply(x);
                hx.iter_mut().zip(w).for_each(|(v, w)| *v *= w);
                self.op.adjoint(&hx)
            }
        };
        out.iter_mut().zip(x).for_each(|(o, xi)| *o += self.shift * xi);
        out
    }

    /// `Hᵀ W v`.
    fn weighted_adjoint(&self, v: &[f64]) -> Vec<f64> {
        let mut wv = v.to_vec();
        self.weights.times(&mut wv);
        self.op.adjoint(&wv)
    }

    fn solve(&self, rhs: &[f64], x: &mut [f64], tol: &SolverTolerances) -> Result<CgStats> {
        let apply = |v: &[f64]| self.apply(v);
        let w_bar = self.weights.mean();
        let pre = self
            .circulant
            .as_ref()
            .map(|c| move |v: &[f64]| c.solve_shifted(v, self.shift, w_bar));
        let pre_ref: Option<&dyn Fn(&[f64]) -> Vec<f64>> = match &pre {
            Some(p) => Some(p),
            None => None,
        };
        conjugate_gradient(&apply, rhs, x, pre_ref, tol.cg_rel_tol, tol.cg_max_iter)
    }

    /// Like `solve`, but a CG run that hits the iteration cap keeps its iterate.
    /// Returns whether the solve converged.
    fn solve_inexact(
        &self,
        rhs: &[f64],
        x: &mut [f64],
        tol: &SolverTolerances,
        diag: &mut RefineDiagnostics,
    ) -> Result<bool> {
        match self.solve(rhs, x, tol) {
            Ok(s) => {
                diag.record(s);
                Ok(true)
            }
            Err(RirError::CgNotConverged {
                iterations,
                relative_residual,
            }) => {
                diag.record(CgStats {
                    iterations,
                    relative_residual,
                });
                diag.inexact_solves += 1;
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    /// Solves `A κ = √shift·ε₁ + Hᵀ W^{1/2} ε₂` from a zero start.
    fn sample(
        &self,
        rng: &mut NoiseStream,
        tol: &SolverTolerances,
        diag: &mut RefineDiagnostics,
    ) -> Result<Vec<f64>> {
        let n = self.op.input_len();
        let e1 = rng.normal_vec(n);
        let mut e2 = rng.normal_vec(self.op.output_len());
        self.weights.sqrt_times(&mut e2);
        let mut rhs = self.op.adjoint(&e2);
        let s = self.shift.sqrt();
        rhs.iter_mut().zip(&e1).for_each(|(r, e)| *r += s * e);
        let mut kappa = vec![0.0; n];
        if self.exact_sampling {
            diag.record(self.solve(&rhs, &mut kappa, tol)?);
        } else {
            // truncated CG from zero: a perturbation with slightly shrunk covariance
            self.solve_inexact(&rhs, &mut kappa, tol, diag)?;
        }
        Ok(kappa)
    }
}

fn check_op(h: &dyn LinearOperator, y: &SignalBuffer, x_hat: &SignalBuffer) -> Result<()> {
    check_len(h.output_len(), y.len())?;
    check_len(h.input_len(), x_hat.len())
}

/// Linear-Gaussian model: solves `(ν⁻²I + σ⁻²HᵀH) μ = ν⁻²x̂ + σ⁻²Hᵀy` by CG
/// from `x̂`, and the matching perturbation system with fresh noise.
pub fn refine_linear_cg(
    h: &dyn LinearOperator,
    y: &SignalBuffer,
    x_hat: &SignalBuffer,
    sigma_n: f64,
    nu_t: f64,
    tol: &SolverTolerances,
    rng: Option<&mut NoiseStream>,
) -> Result<RefineResult> {
    check_op(h, y, x_hat)?;
    check_params(sigma_n, nu_t)?;
    if sigma_n == 0.0 {
        return Err(RirError::invalid("sigma_n must be positive for a CG refinement"));
    }
    let n = x_hat.len();
    if nu_t == 0.0 {
        return finish(x_hat, x_hat.samples().to_vec(), vec![0.0; n], RefineDiagnostics::default());
    }
    let prior = 1.0 / (nu_t * nu_t);
    let sys = NormalSystem::new(h, prior, Weights::Scalar(1.0 / (sigma_n * sigma_n)), tol);
    let mut diag = RefineDiagnostics::default();
    let mut rhs = sys.weighted_adjoint(y.samples());
    rhs.iter_mut()
        .zip(x_hat.samples())
        .for_each(|(r, x)| *r += prior * x);
    let mut mu = x_hat.samples().to_vec();
    diag.record(sys.solve(&rhs, &mut mu, tol)?);
    let kappa = match rng {
        Some(r) => sys.sample(r, tol, &mut diag)?,
        None => vec![0.0; n],
    };
    finish(x_hat, mu, kappa, diag)
}

/// Shared IRLS loop. Weights are multiplied by `weight_scale`, which lets the
/// maximum-likelihood baseline work in units where the quadratic weight is 1.
pub(crate) struct HuberProblem<'a> {
    pub op: &'a dyn LinearOperator,
    pub y: &'a [f64],
    pub prior_mean: &'a [f64],
    pub prior_precision: f64,
    pub sigma_n: f64,
    pub laplace_b: f64,
    pub weight_scale: f64,
}

impl HuberProblem<'_> {
    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.op.apply(x);
        r.iter_mut().zip(self.y).for_each(|(r, y)| *r -= y);
        r
    }

    fn weights(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .map(|&ri| self.weight_scale * huber_weight(ri, self.sigma_n, self.laplace_b))
            .collect()
    }

    pub(crate) fn objective(&self, x: &[f64]) -> f64 {
        let delta = self.sigma_n * self.sigma_n / self.laplace_b;
        let data: f64 = self.residual(x).iter().map(|&r| huber_rho(r, delta)).sum();
        let prior: f64 = x
            .iter()
            .zip(self.prior_mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.weight_scale * data / (self.sigma_n * self.sigma_n) + 0.5 * self.prior_precision * prior
    }

    /// Runs IRLS from `x` and returns the final system for sampling.
    pub(crate) fn solve<'s>(
        &'s self,
        x: &mut [f64],
        tol: &SolverTolerances,
        diag: &mut RefineDiagnostics,
    ) -> Result<NormalSystemHandle<'s>> {
        let mut w = self.weights(&self.residual(x));
        diag.objective.push(self.objective(x));
        for _ in 0..tol.irls_iters {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(RirError::Domain("non-finite IRLS weight".into()));
            }
            let sys = NormalSystem::new(self.op, self.prior_precision, Weights::from_vec(w.clone()), tol);
            let mut rhs = sys.weighted_adjoint(self.y);
            rhs.iter_mut()
                .zip(self.prior_mean)
                .for_each(|(r, m)| *r += self.prior_precision * m);
            let before = *diag.objective.last().expect("objective seeded above");
            let start = x.to_vec();
            let converged = sys.solve_inexact(&rhs, x, tol, diag)?;
            diag.outer_iterations += 1;
            let phi = self.objective(x);
            if !converged && phi > before {
                // a truncated solve that lost ground is a real failure
                x.copy_from_slice(&start);
                return Err(RirError::CgNotConverged {
                    iterations: tol.cg_max_iter,
                    relative_residual: diag.max_relative_residual,
                });
            }
            diag.objective.push(phi);
            let w_next = self.weights(&self.residual(x));
            let fixed = w_next == w;
            w = w_next;
            // a truncated pass still lowers the majorizer; later passes would
            // only be harder, so stop here
            if fixed || !converged {
                break;
            }
        }
        Ok(NormalSystemHandle(
            NormalSystem::new(self.op, self.prior_precision, Weights::from_vec(w), tol).relaxed(),
        ))
    }
}

/// Opaque wrapper so the IRLS system can be reused for sampling.
pub(crate) struct NormalSystemHandle<'a>(NormalSystem<'a>);

/// `argmin ‖Hx − y‖²/(2σ²) + p/2·‖x − m‖²`, solved by CG from `m`.
fn gaussian_refinement(
    h: &dyn LinearOperator,
    y: &[f64],
    prior_mean: &[f64],
    sigma_n: f64,
    prior_precision: f64,
    tol: &SolverTolerances,
    diag: &mut RefineDiagnostics,
) -> Result<Vec<f64>> {
    let sys = NormalSystem::new(h, prior_precision, Weights::Scalar(1.0 / (sigma_n * sigma_n)), tol);
    let mut rhs = sys.weighted_adjoint(y);
    rhs.iter_mut()
        .zip(prior_mean)
        .for_each(|(r, m)| *r += prior_precision * m);
    let mut x = prior_mean.to_vec();
    diag.record(sys.solve(&rhs, &mut x, tol)?);
    Ok(x)
}

/// Gaussian plus Laplacian noise: Huber data term minimized by IRLS.
#[allow(clippy::too_many_arguments)]
pub fn refine_huber_irls(
    h: &dyn LinearOperator,
    y: &SignalBuffer,
    x_hat: &SignalBuffer,
    sigma_n: f64,
    laplace_b: f64,
    nu_t: f64,
    tol: &SolverTolerances,
    rng: Option<&mut NoiseStream>,
) -> Result<RefineResult> {
    check_op(h, y, x_hat)?;
    check_params(sigma_n, nu_t)?;
    if sigma_n == 0.0 {
        return Err(RirError::invalid("sigma_n must be positive for a Huber refinement"));
    }
    if !(laplace_b > 0.0) || !laplace_b.is_finite() {
        return Err(RirError::invalid("Laplace scale b must be positive"));
    }
    let n = x_hat.len();
    if nu_t == 0.0 {
        return finish(x_hat, x_hat.samples().to_vec(), vec![0.0; n], RefineDiagnostics::default());
    }
    let problem = HuberProblem {
        op: h,
        y: y.samples(),
        prior_mean: x_hat.samples(),
        prior_precision: 1.0 / (nu_t * nu_t),
        sigma_n,
        laplace_b,
        weight_scale: 1.0,
    };
    // start IRLS from the Gaussian refinement so the first weights come from
    // noise-sized residuals rather than from an inconsistent x̂
    let mut diag = RefineDiagnostics::default();
    let mut mu = gaussian_refinement(h, y.samples(), x_hat.samples(), sigma_n, problem.prior_precision, tol, &mut diag)?;
    let sys = problem.solve(&mut mu, tol, &mut diag)?;
    let kappa = match rng {
        Some(r) => sys.0.sample(r, tol, &mut diag)?,
        None => vec![0.0; n],
    };
    finish(x_hat, mu, kappa, diag)
}

/// Linearization of `x ↦ 𝒞(Hx)` at a point: `J = diag(𝒞′(Hx))·H`.
pub struct ClipJacobian<'a> {
    op: &'a dyn LinearOperator,
    deriv: Vec<f64>,
}

impl<'a> ClipJacobian<'a> {
    pub fn at(op: &'a dyn LinearOperator, clip: &ClipSpec, x: &[f64]) -> Self {
        let deriv = op
            .apply(x)
            .iter()
            .map(|&z| soft_clip_deriv_scalar(z, clip))
            .collect();
        Self { op, deriv }
    }

    pub fn deriv(&self) -> &[f64] {
        &self.deriv
    }
}

impl LinearOperator for ClipJacobian<'_> {
    fn input_len(&self) -> usize {
        self.op.input_len()
    }
    fn output_len(&self) -> usize {
        self.op.output_len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.op.apply(x);
        z.iter_mut().zip(&self.deriv).for_each(|(v, d)| *v *= d);
        z
    }
    fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        let dr: Vec<f64> = r.iter().zip(&self.deriv).map(|(v, d)| v * d).collect();
        self.op.adjoint(&dr)
    }
}

/// `data_scale/2·‖𝒞(Hx) − y‖² + prior_precision/2·‖x − m‖²`, minimized by
/// damped Gauss–Newton with step halving.
pub(crate) struct DeclipProblem<'a> {
    pub op: &'a dyn LinearOperator,
    pub clip: &'a ClipSpec,
    pub y: &'a [f64],
    pub prior_mean: &'a [f64],
    pub prior_precision: f64,
    pub data_scale: f64,
}

const MAX_HALVINGS: usize = 10;

impl DeclipProblem<'_> {
    pub(crate) fn objective(&self, x: &[f64]) -> f64 {
        let z = self.op.apply(x);
        let data: f64 = z
            .iter()
            .zip(self.y)
            .map(|(&z, &y)| {
                let r = soft_clip_scalar(z, self.clip) - y;
                r * r
            })
            .sum();
        let prior: f64 = x
            .iter()
            .zip(self.prior_mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        0.5 * self.data_scale * data + 0.5 * self.prior_precision * prior
    }

    pub(crate) fn solve(
        &self,
        x: &mut [f64],
        tol: &SolverTolerances,
        diag: &mut RefineDiagnostics,
    ) -> Result<()> {
        let n = x.len();
        let mut phi = self.objective(x);
        diag.objective.push(phi);
        for _ in 0..tol.gn_iters {
            let z = self.op.apply(x);
            let mut r = Vec::with_capacity(z.len());
            let mut d2 = Vec::with_capacity(z.len());
            for (&zi, &yi) in z.iter().zip(self.y) {
                let d = soft_clip_deriv_scalar(zi, self.clip);
                r.push(d * (soft_clip_scalar(zi, self.clip) - yi));
                d2.push(self.data_scale * d * d);
            }
            // gradient: data_scale·Jᵀ r + p (x − m)
            let mut grad = self.op.adjoint(&r);
            for i in 0..n {
                grad[i] = self.data_scale * grad[i]
                    + self.prior_precision * (x[i] - self.prior_mean[i]);
            }
            let g_norm = norm(&grad);
            if g_norm == 0.0 {
                break;
            }
            let sys = NormalSystem::new(
                self.op,
                self.prior_precision + tol.gn_damping,
                Weights::Diag(d2),
                tol,
            );
            let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
            let mut step = vec![0.0; n];
            // an inexact GN direction is still a descent direction
            sys.solve_inexact(&rhs, &mut step, &tol.gn_inner(), diag)?;
            diag.outer_iterations += 1;
            let mut scale = 1.0;
            let mut accepted = false;
            for h in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + scale * s).collect();
                let phi_trial = self.objective(&trial);
                if phi_trial <= phi {
                    x.copy_from_slice(&trial);
                    phi = phi_trial;
                    accepted = true;
                    diag.step_halvings += h;
                    break;
                }
                scale *= 0.5;
            }
            diag.objective.push(phi);
            if !accepted {
                diag.step_halvings += MAX_HALVINGS;
                diag.stalled = true;
                break;
            }
        }
        Ok(())
    }

    /// Perturbation from `p·I + data_scale·JᵀJ` at `x`.
    fn sample(
        &self,
        x: &[f64],
        rng: &mut NoiseStream,
        tol: &SolverTolerances,
        diag: &mut RefineDiagnostics,
    ) -> Result<Vec<f64>> {
        let d2: Vec<f64> = self
            .op
            .apply(x)
            .iter()
            .map(|&z| {
                let d = soft_clip_deriv_scalar(z, self.clip);
                self.data_scale * d * d
            })
            .collect();
        let inner = tol.gn_inner();
        NormalSystem::new(self.op, self.prior_precision, Weights::Diag(d2), &inner)
            .relaxed()
            .sample(rng, &inner, diag)
    }
}

/// Smoothly clipped convolution: damped Gauss–Newton from `x̂`.
#[allow(clippy::too_many_arguments)]
pub fn refine_declip_gn(
    h: &dyn LinearOperator,
    clip: &ClipSpec,
    y: &SignalBuffer,
    x_hat: &SignalBuffer,
    sigma_n: f64,
    nu_t: f64,
    tol: &SolverTolerances,
    rng: Option<&mut NoiseStream>,
) -> Result<RefineResult> {
    check_op(h, y, x_hat)?;
    check_params(sigma_n, nu_t)?;
    if sigma_n == 0.0 {
        return Err(RirError::invalid("sigma_n must be positive for a declipping refinement"));
    }
    let n = x_hat.len();
    if nu_t == 0.0 {
        return finish(x_hat, x_hat.samples().to_vec(), vec![0.0; n], RefineDiagnostics::default());
    }
    let problem = DeclipProblem {
        op: h,
        clip,
        y: y.samples(),
        prior_mean: x_hat.samples(),
        prior_precision: 1.0 / (nu_t * nu_t),
        data_scale: 1.0 / (sigma_n * sigma_n),
    };
    // GN is local and the objective is not convex. Where Hx̂ saturates the
    // clip derivative vanishes, so a start at x̂ stays put even when x̂ is far
    // too loud. The unclipped Gaussian refinement starts GN in the basin that
    // agrees with the data instead.
    let mut diag = RefineDiagnostics::default();
    let mut mu = gaussian_refinement(h, y.samples(), x_hat.samples(), sigma_n, problem.prior_precision, tol, &mut diag)?;
    problem.solve(&mut mu, tol, &mut diag)?;
    let kappa = match rng {
        Some(r) => problem.sample(&mu, r, tol, &mut diag)?,
        None => vec![0.0; n],
    };
    finish(x_hat, mu, kappa, diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_ops::{ConvOperator, Identity};
    use crate::testutil::*;

    fn buf(v: Vec<f64>) -> SignalBuffer {
        SignalBuffer::new(v, 8000).unwrap()
    }

    fn tight() -> SolverTolerances {
        SolverTolerances {
            cg_rel_tol: 1e-12,
            cg_max_iter: 2000,
            ..Default::default()
        }
    }

    #[test]
    fn denoise_limits() {
        let y = buf(vec![1.0, -2.0, 0.5]);
        let xh = buf(vec![0.0, 1.0, 0.5]);
        let r = refine_denoise(&y, &xh, 0.3, 0.3, None).unwrap();
        for i in 0..3 {
            assert!((r.mu.samples()[i] - 0.5 * (y.samples()[i] + xh.samples()[i])).abs() < 1e-15);
        }
        let r = refine_denoise(&y, &xh, 1e-12, 0.5, None).unwrap();
        for i in 0..3 {
            assert!((r.mu.samples()[i] - y.samples()[i]).abs() <= 1e-6 * y.samples()[i].abs());
        }
        let r = refine_denoise(&y, &xh, 0.5, 0.0, None).unwrap();
        assert_eq!(r.mu, xh);
        assert!(refine_denoise(&y, &xh, 0.0, 0.0, None).is_err());
        assert!(refine_denoise(&y, &buf(vec![1.0]), 0.1, 0.1, None).is_err());
    }

    #[test]
    fn diagonal_kappa_variance() {
        let n = 4;
        let y = buf(vec![0.0; n]);
        let xh = buf(vec![0.0; n]);
        let mask = MaskOperator::new(vec![true, false, true, false]);
        let (s, nu) = (0.2, 0.5);
        let post = 1.0 / (1.0 / (s * s) + 1.0 / (nu * nu));
        let mut rng = NoiseStream::new(10);
        let draws = 10_000;
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut dsum = 0.0;
        let mut dsq = 0.0;
        for _ in 0..draws {
            let k = refine_inpaint(&mask, &y, &xh, s, nu, Some(&mut rng)).unwrap().kappa;
            for i in 0..n {
                sum[i] += k.samples()[i];
                sq[i] += k.samples()[i].powi(2);
            }
            let d = refine_denoise(&y, &xh, s, nu, Some(&mut rng)).unwrap().kappa.samples()[0];
            dsum += d;
            dsq += d * d;
        }
        for i in 0..n {
            let mean = sum[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            let want = if mask.keep[i] { post } else { nu * nu };
            assert!(mean.abs() < 4.0 * (want / draws as f64).sqrt());
            assert!((var / want - 1.0).abs() < 0.1, "sample {i}: {var} vs {want}");
        }
        let var = dsq / draws as f64 - (dsum / draws as f64).powi(2);
        assert!((var / post - 1.0).abs() < 0.1);
    }

    #[test]
    fn inpaint_cases() {
        let y = buf(vec![1.0, 2.0, 3.0, 4.0]);
        let xh = buf(vec![0.5, 0.5, 0.5, 0.5]);
        let all = MaskOperator::new(vec![true; 4]);
        let a = refine_inpaint(&all, &y, &xh, 0.1, 0.4, None).unwrap();
        let b = refine_denoise(&y, &xh, 0.1, 0.4, None).unwrap();
        assert_eq!(a.mu, b.mu);
        let none = MaskOperator::new(vec![false; 4]);
        assert_eq!(refine_inpaint(&none, &y, &xh, 0.1, 0.4, None).unwrap().mu, xh);
        let m = MaskOperator::new(vec![true, false, false, true]);
        let r = refine_inpaint(&m, &y, &xh, 0.1, 0.4, None).unwrap();
        let oracle = |y: f64, x: f64| (y / 0.01 + x / 0.16) / (1.0 / 0.01 + 1.0 / 0.16);
        assert!((r.mu.samples()[0] - oracle(1.0, 0.5)).abs() < 1e-14);
        assert!((r.mu.samples()[3] - oracle(4.0, 0.5)).abs() < 1e-14);
        assert_eq!(r.mu.samples()[1], 0.5);
    }

    #[test]
    fn identity_cg_matches_closed_form() {
        let mut rng = NoiseStream::new(1);
        let y = buf(rng.normal_vec(50));
        let xh = buf(rng.normal_vec(50));
        let a = refine_linear_cg(&Identity { len: 50 }, &y, &xh, 0.3, 0.7, &tight(), None).unwrap();
        let b = refine_denoise(&y, &xh, 0.3, 0.7, None).unwrap();
        for (p, q) in a.mu.samples().iter().zip(b.mu.samples()) {
            assert!((p - q).abs() <= 1e-8 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn cg_matches_dense_solve() {
        let mut rng = NoiseStream::new(2);
        let (n, m) = (64, 9);
        let h = rng.normal_vec(m);
        let op = ConvOperator::from_slice(&h, n).unwrap();
        let y = rng.normal_vec(n + m - 1);
        let xh = rng.normal_vec(n);
        let (s, nu) = (0.5, 0.8);
        let oracle = dense_prox_l2(&h, &y, &xh, s, nu);
        for pre in [Preconditioner::None, Preconditioner::Circulant] {
            let tol = SolverTolerances {
                preconditioner: pre,
                ..tight()
            };
            let r = refine_linear_cg(&op, &buf(y.clone()), &buf(xh.clone()), s, nu, &tol, None).unwrap();
            assert!(rel_err(r.mu.samples(), &oracle) <= 1e-6);
        }
    }

    #[test]
    fn noiseless_inversion_recovers_truth() {
        let sweep = crate::forward_ops::ess_sweep(0.1, 20.0, 3800.0, 8000).unwrap();
        let n = 400;
        let op = ConvOperator::new(&sweep, n).unwrap();
        let mut rng = NoiseStream::new(3);
        let x = crate::signal::synth_rir(0.3, 1.0, n, 8000, 4).unwrap();
        let y = buf(op.apply(x.samples()));
        let xh = buf(rng.normal_vec(n));
        let tol = SolverTolerances {
            cg_max_iter: 5000,
            preconditioner: Preconditioner::Circulant,
            ..tight()
        };
        let r = refine_linear_cg(&op, &y, &xh, 1e-6, 1.0, &tol, None).unwrap();
        assert!(rel_err(r.mu.samples(), x.samples()) <= 1e-3);
    }

    #[test]
    fn system_scaling_leaves_mu_unchanged() {
        // (a·A) μ = a·b for any a > 0: scaling both precisions by 1/s² is the same system
        let mut rng = NoiseStream::new(5);
        let op = ConvOperator::from_slice(&rng.normal_vec(7), 40).unwrap();
        let y = buf(rng.normal_vec(46));
        let xh = buf(rng.normal_vec(40));
        let a = refine_linear_cg(&op, &y, &xh, 0.2, 0.5, &tight(), None).unwrap();
        let b = refine_linear_cg(&op, &y, &xh, 0.2 * 3.0, 0.5 * 3.0, &tight(), None).unwrap();
        assert!(rel_err(a.mu.samples(), b.mu.samples()) < 1e-9);
    }

    #[test]
    fn huber_rho_values() {
        let d = 0.4;
        assert!((huber_rho(d, d) - d * d / 2.0).abs() < 1e-15);
        assert!((huber_rho(-2.0 * d, d) - 1.5 * d * d).abs() < 1e-15);
        assert_eq!(huber_rho(0.0, d), 0.0);
    }

    #[test]
    fn huber_quadratic_regime_equals_l2() {
        let mut rng = NoiseStream::new(6);
        let (n, m) = (40, 5);
        let op = ConvOperator::from_slice(&rng.normal_vec(m), n).unwrap();
        let x = rng.normal_vec(n);
        let y_clean = op.apply(&x);
        let s = 0.1;
        // tiny noise, and x̂ close to the truth so every residual stays below δ
        let y: Vec<f64> = y_clean.iter().map(|v| v + 1e-4 * rng.standard_normal()).collect();
        let xh: Vec<f64> = x.iter().map(|v| v + 1e-4 * rng.standard_normal()).collect();
        let b = 1e-3; // δ = 10
        let (yb, xb) = (buf(y), buf(xh));
        let l2 = refine_linear_cg(&op, &yb, &xb, s, 0.5, &tight(), None).unwrap();
        let hub = refine_huber_irls(&op, &yb, &xb, s, b, 0.5, &tight(), None).unwrap();
        assert_eq!(l2.mu, hub.mu);
        assert_eq!(hub.diagnostics.outer_iterations, 1);
    }

    #[test]
    fn huber_matches_convex_oracle() {
        let mut rng = NoiseStream::new(7);
        let (n, m) = (48, 6);
        let h = rng.normal_vec(m);
        let op = ConvOperator::from_slice(&h, n).unwrap();
        let x = rng.normal_vec(n);
        let mut y = op.apply(&x);
        for (i, v) in y.iter_mut().enumerate() {
            *v += 0.05 * rng.standard_normal() + if i % 7 == 0 { 3.0 } else { 0.0 };
        }
        let xh = rng.normal_vec(n);
        let (s, b, nu) = (0.1, 0.05, 0.7);
        let tol = SolverTolerances {
            irls_iters: 500,
            ..tight()
        };
        let r = refine_huber_irls(&op, &buf(y.clone()), &buf(xh.clone()), s, b, nu, &tol, None).unwrap();
        let oracle = huber_prox_gradient_oracle(&h, &y, &xh, s, b, nu);
        assert!(rel_err(r.mu.samples(), &oracle) <= 1e-4, "{}", rel_err(r.mu.samples(), &oracle));
        let obj = &r.diagnostics.objective;
        for w in obj.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn declip_linear_regime_matches_cg() {
        let mut rng = NoiseStream::new(8);
        let op = ConvOperator::from_slice(&rng.normal_vec(6), 40).unwrap();
        let x = rng.normal_vec(40);
        let y = buf(op.apply(&x).iter().map(|v| 0.01 * v).collect());
        let xh = buf(vec![0.0; 40]);
        let clip = ClipSpec::new(1.0, 1000.0, 1e3).unwrap();
        let a = refine_linear_cg(&op, &y, &xh, 0.05, 0.3, &tight(), None).unwrap();
        let b = refine_declip_gn(&op, &clip, &y, &xh, 0.05, 0.3, &tight(), None).unwrap();
        assert!(rel_err(b.mu.samples(), a.mu.samples()) <= 1e-4);
    }

    #[test]
    fn declip_objective_is_monotone() {
        for seed in 0..20 {
            let mut rng = NoiseStream::new(100 + seed);
            let n = 64;
            let op = ConvOperator::from_slice(&rng.normal_vec(16), n).unwrap();
            let x = rng.normal_vec(n);
            let clean = op.apply(&x);
            let clip = ClipSpec::from_reference(0.2, 1000.0, &clean).unwrap();
            let y: Vec<f64> = clean
                .iter()
                .map(|v| v.clamp(-clip.tau, clip.tau) + 0.01 * rng.standard_normal())
                .collect();
            let xh = rng.normal_vec(n);
            let r = refine_declip_gn(&op, &clip, &buf(y), &buf(xh), 0.05, 0.5, &SolverTolerances::default(), None)
                .unwrap();
            let obj = &r.diagnostics.objective;
            assert!(obj.len() >= 2);
            for w in obj.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {obj:?}");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = NoiseStream::new(9);
        let n = 32;
        let op = ConvOperator::from_slice(&rng.normal_vec(5), n).unwrap();
        let clip = ClipSpec::new(0.5, 50.0, 0.8).unwrap();
        let x = rng.normal_vec(n);
        let v = rng.normal_vec(n);
        let jac = ClipJacobian::at(&op, &clip, &x);
        let f = |x: &[f64]| -> Vec<f64> {
            op.apply(x).iter().map(|&z| soft_clip_scalar(z, &clip)).collect()
        };
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let fd: Vec<f64> = f(&xp).iter().zip(f(&xm)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let jv = jac.apply(&v);
        assert!(rel_err(&jv, &fd) <= 1e-4);
        let jtj_fd = jac.adjoint(&fd);
        assert!(rel_err(&jac.gram(&v), &jtj_fd) <= 1e-4);
    }

    #[test]
    fn prox_optimality_on_smooth_tasks() {
        let mut rng = NoiseStream::new(11);
        let n = 50;
        let op = ConvOperator::from_slice(&rng.normal_vec(8), n).unwrap();
        let y = rng.normal_vec(n + 7);
        let xh = rng.normal_vec(n);
        let (s, nu) = (0.3, 0.6);
        let r = refine_linear_cg(&op, &buf(y.clone()), &buf(xh.clone()), s, nu, &tight(), None).unwrap();
        let mu = r.mu.samples();
        let mut res = op.apply(mu);
        res.iter_mut().zip(&y).for_each(|(a, b)| *a -= b);
        let g: Vec<f64> = op
            .adjoint(&res)
            .iter()
            .zip(mu.iter().zip(&xh))
            .map(|(a, (m, x))| a / (s * s) + (m - x) / (nu * nu))
            .collect();
        assert!(norm(&g) <= 1e-5 * (1.0 + norm(mu)));
    }

    #[test]
    fn refinement_is_deterministic() {
        let mut rng = NoiseStream::new(12);
        let op = ConvOperator::from_slice(&rng.normal_vec(4), 20).unwrap();
        let y = buf(rng.normal_vec(23));
        let xh = buf(rng.normal_vec(20));
        let run = || {
            let mut r = NoiseStream::new(77);
            refine_huber_irls(&op, &y, &xh, 0.1, 0.1, 0.5, &tight(), Some(&mut r)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tolerances_validate() {
        assert!(SolverTolerances::default().validate().is_ok());
        let bad = SolverTolerances {
            cg_rel_tol: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
