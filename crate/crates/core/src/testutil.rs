//! Dense reference implementations used as independent oracles in unit tests.

use crate::refine::huber_rho;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Full convolution matrix, `(n + m − 1) × n`.
pub fn conv_matrix(h: &[f64], n: usize) -> Vec<Vec<f64>> {
    let rows = n + h.len() - 1;
    let mut a = vec![vec![0.0; n]; rows];
    for (j, col) in (0..n).enumerate() {
        for (k, &hk) in h.iter().enumerate() {
            a[col + k][j] = hk;
        }
    }
    a
}

pub fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn matvec_t(a: &[Vec<f64>], r: &[f64]) -> Vec<f64> {
    let n = a[0].len();
    let mut out = vec![0.0; n];
    for (row, &ri) in a.iter().zip(r) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v * ri;
        }
    }
    out
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// `(ν⁻²I + σ⁻²HᵀH)⁻¹(ν⁻²x̂ + σ⁻²Hᵀy)` assembled explicitly.
pub fn dense_prox_l2(h: &[f64], y: &[f64], xh: &[f64], sigma: f64, nu: f64) -> Vec<f64> {
    let n = xh.len();
    let hm = conv_matrix(h, n);
    let (ps, pn) = (1.0 / (sigma * sigma), 1.0 / (nu * nu));
    let mut a = vec![vec![0.0; n]; n];
    for row in &hm {
        for i in 0..n {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                a[i][j] += ps * row[i] * row[j];
            }
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += pn;
    }
    let hty = matvec_t(&hm, y);
    let b: Vec<f64> = hty.iter().zip(xh).map(|(p, q)| ps * p + pn * q).collect();
    solve_dense(a, b)
}

fn spectral_norm_sq(a: &[Vec<f64>]) -> f64 {
    let n = a[0].len();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lam = 0.0;
    for _ in 0..500 {
        let w = matvec_t(a, &matvec(a, &v));
        lam = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / lam).collect();
    }
    lam
}

/// Accelerated gradient descent on the Huber proximal objective, which is
/// smooth and strongly convex, run until the objective stops changing at 1e−14.
pub fn huber_prox_gradient_oracle(
    h: &[f64],
    y: &[f64],
    xh: &[f64],
    sigma: f64,
    b: f64,
    nu: f64,
) -> Vec<f64> {
    let n = xh.len();
    let hm = conv_matrix(h, n);
    let delta = sigma * sigma / b;
    let (ps, pn) = (1.0 / (sigma * sigma), 1.0 / (nu * nu));
    let lips = ps * spectral_norm_sq(&hm) + pn;
    let kappa = lips / pn;
    let momentum = (kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0);
    let objective = |x: &[f64]| -> f64 {
        let r = matvec(&hm, x);
        let data: f64 = r.iter().zip(y).map(|(a, b)| huber_rho(a - b, delta)).sum();
        let prior: f64 = x.iter().zip(xh).map(|(a, b)| (a - b) * (a - b)).sum();
        ps * data + 0.5 * pn * prior
    };
    let grad = |x: &[f64]| -> Vec<f64> {
        let r: Vec<f64> = matvec(&hm, x)
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b).clamp(-delta, delta))
            .collect();
        matvec_t(&hm, &r)
            .iter()
            .zip(x.iter().zip(xh))
            .map(|(g, (a, b))| ps * g + pn * (a - b))
            .collect()
    };
    let mut x = xh.to_vec();
    let mut prev = x.clone();
    let mut last = objective(&x);
    let mut stable = 0;
    for _ in 0..1_000_000 {
        let z: Vec<f64> = x
            .iter()
            .zip(&prev)
            .map(|(a, b)| a + momentum * (a - b))
            .collect();
        let g = grad(&z);
        prev = x;
        x = z.iter().zip(&g).map(|(a, b)| a - b / lips).collect();
        let f = objective(&x);
        if (last - f).abs() <= 1e-14 * f.abs() {
            stable += 1;
            if stable > 200 {
                break;
            }
        } else {
            stable = 0;
        }
        last = f;
    }
    x
}
