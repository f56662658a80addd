//! Damped Newton minimization with a Hessian built from gradient differences.
//!
//! Meant for small, badly conditioned problems where a quasi-Newton memory
//! cannot capture the curvature. Each iteration costs `2n` gradient calls.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Stop when the largest gradient entry falls below this.
    pub gtol: f64,
    /// Relative difference step for the Hessian.
    pub fd_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iter: 50,
            gtol: 1e-10,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn hessian(f: &mut impl FnMut(&[f64]) -> (f64, Vec<f64>), x: &[f64], h_rel: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let step = h_rel * (1.0 + x[j].abs());
        xp[j] = x[j] + step;
        let (_, gp) = f(&xp);
        xp[j] = x[j] - step;
        let (_, gm) = f(&xp);
        xp[j] = x[j];
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Newton direction on `H + mu I`, raising `mu` until the shifted matrix is
/// positive definite.
fn direction(h: &DMatrix<f64>, g: &DVector<f64>, mu: &mut f64) -> Option<DVector<f64>> {
    let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for _ in 0..80 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += *mu;
        }
        if let Some(c) = m.cholesky() {
            return Some(-c.solve(g));
        }
        *mu = (*mu * 4.0).max(1e-12 * scale);
    }
    None
}

/// Minimize `f`, which returns the value and gradient at a point.
pub fn minimize(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), x0: Vec<f64>, opts: &NewtonOptions) -> NewtonResult {
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut it = 0;
    let mut mu = 0.0;
    while it < opts.max_iter && inf(&g) > opts.gtol && fx.is_finite() {
        it += 1;
        let h = hessian(&mut f, &x, opts.fd_step);
        let gv = DVector::from_column_slice(&g);
        let Some(d) = direction(&h, &gv, &mut mu) else { break };
        let slope = gv.dot(&d);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(d.iter()).map(|(x, d)| x + step * d).collect();
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        mu = if step == 1.0 { mu * 0.25 } else { mu * 2.0 };
        x = xn;
        fx = fn_;
        g = gn;
    }
    let grad_norm = inf(&g);
    NewtonResult {
        x,
        value: fx,
        iterations: it,
        grad_norm,
    }
}
