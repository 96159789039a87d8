//! Conjugate gradients for symmetric positive definite systems.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RirError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` in place, starting from the contents of `x`.
///
/// Stops once `‖b − A x‖ ≤ tol·‖b‖`. `precond`, when given, applies an SPD
/// approximation of `A⁻¹`.
pub fn conjugate_gradient(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x: &mut [f64],
    precond: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<CgStats> {
    if b.len() != x.len() {
        return Err(RirError::LengthMismatch {
            expected: b.len(),
            actual: x.len(),
        });
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let target = tol * b_norm;
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut r_norm = norm(&r);
    if !r_norm.is_finite() {
        return Err(RirError::Domain("non-finite residual in conjugate gradient".into()));
    }
    if r_norm <= target {
        return Ok(CgStats {
            iterations: 0,
            relative_residual: r_norm / b_norm,
        });
    }
    let mut z = match precond {
        Some(p) => p(&r),
        None => r.clone(),
    };
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(RirError::Domain(format!(
                "conjugate gradient hit a non-positive curvature {pap:.3e}"
            )));
        }
        let alpha = rz / pap;
        for ((xi, ri), (pi, api)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        r_norm = norm(&r);
        if !r_norm.is_finite() {
            return Err(RirError::Domain("non-finite residual in conjugate gradient".into()));
        }
        if r_norm <= target {
            return Ok(CgStats {
                iterations: it,
                relative_residual: r_norm / b_norm,
            });
        }
        z = match precond {
            Some(pc) => pc(&r),
            None => r.clone(),
        };
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(RirError::CgNotConverged {
        iterations: max_iter,
        relative_residual: r_norm / b_norm,
    })
}
