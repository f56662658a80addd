//! Dense convex QP by a primal-dual interior-point method.
//!
//! Solves `min 1/2 x'Hx + c'x` subject to `Ax = b` and `Gx <= d` with
//! Mehrotra's predictor-corrector steps. Multipliers follow the Lagrangian
//! `f + y'(Ax - b) + z'(Gx - d)` with `z >= 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Qp {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub d: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub iterations: usize,
}

/// Infinity norms of the optimality conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_equality: f64,
    /// Largest `Gx - d` above zero.
    pub primal_inequality: f64,
    /// Largest `|z_i (Gx - d)_i|`.
    pub complementarity: f64,
    /// Largest negative multiplier magnitude.
    pub dual_sign: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.stationarity,
            self.primal_equality,
            self.primal_inequality,
            self.complementarity,
            self.dual_sign,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Residuals of `(x, y, z)` on `qp`.
pub fn kkt_residuals(qp: &Qp, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> KktResiduals {
    let stat = &qp.h * x + &qp.c + qp.a.transpose() * y + qp.g.transpose() * z;
    let slack = &qp.g * x - &qp.d;
    KktResiduals {
        stationarity: inf_norm(&stat),
        primal_equality: inf_norm(&(&qp.a * x - &qp.b)),
        primal_inequality: slack.iter().fold(0.0, |m, &v| m.max(v)),
        complementarity: z.iter().zip(slack.iter()).fold(0.0, |m, (z, s)| m.max((z * s).abs())),
        dual_sign: z.iter().fold(0.0, |m, &v| m.max(-v)),
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .fold(1.0, |a, (v, d)| a.min(-v / d))
}

pub fn solve_qp(qp: &Qp, opts: &QpOptions) -> Result<QpSolution> {
    let n = qp.c.len();
    let me = qp.b.len();
    let mi = qp.d.len();
    if qp.h.shape() != (n, n) || qp.a.shape() != (me, n) || qp.g.shape() != (mi, n) {
        return Err(Error::ShapeMismatch("QP blocks".into()));
    }
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(me);
    let mut s = (&qp.d - &qp.g * &x).map(|v| v.max(1.0));
    let mut z = DVector::from_element(mi, 1.0);
    let scale = 1.0 + inf_norm(&qp.c).max(inf_norm(&qp.b)).max(inf_norm(&qp.d));

    for it in 0..opts.max_iter {
        let r_d = &qp.h * &x + &qp.c + qp.a.transpose() * &y + qp.g.transpose() * &z;
        let r_p = &qp.a * &x - &qp.b;
        let r_i = &qp.g * &x + &s - &qp.d;
        let mu = if mi > 0 { s.dot(&z) / mi as f64 } else { 0.0 };
        let done = inf_norm(&r_d) <= opts.tol * scale
            && inf_norm(&r_p) <= opts.tol * scale
            && inf_norm(&r_i) <= opts.tol * scale
            && s.iter().zip(z.iter()).all(|(s, z)| s * z <= opts.tol);
        if done {
            return Ok(QpSolution { x, y, z, iterations: it });
        }

        let w = z.component_div(&s);
        let mut m = qp.h.clone();
        m += qp.g.transpose() * DMatrix::from_diagonal(&w) * &qp.g;
        let mut k = DMatrix::zeros(n + me, n + me);
        k.view_mut((0, 0), (n, n)).copy_from(&m);
        k.view_mut((0, n), (n, me)).copy_from(&qp.a.transpose());
        k.view_mut((n, 0), (me, n)).copy_from(&qp.a);
        let lu = k.lu();

        // Newton direction for complementarity target `r_c`.
        let direction = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let t = (-r_c + z.component_mul(&r_i)).component_div(&s);
            let rhs_x = -&r_d - qp.g.transpose() * &t;
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&rhs_x);
            rhs.rows_mut(n, me).copy_from(&(-&r_p));
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, me).into_owned();
            let ds = -&r_i - &qp.g * &dx;
            let dz = (-r_c - z.component_mul(&ds)).component_div(&s);
            Some((dx, dy, ds, dz))
        };

        let r_aff = s.component_mul(&z);
        let Some((_, _, ds_a, dz_a)) = direction(&r_aff) else { break };
        let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = if mi > 0 {
            (&s + a_aff * &ds_a).dot(&(&z + a_aff * &dz_a)) / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
        let r_c = &r_aff + ds_a.component_mul(&dz_a) - DVector::from_element(mi, sigma * mu);
        let Some((dx, dy, ds, dz)) = direction(&r_c) else { break };
        let alpha = (0.995 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        if ![&dx, &dy, &ds, &dz].iter().all(|v| v.iter().all(|e| e.is_finite())) {
            break;
        }
        x += alpha * dx;
        y += alpha * dy;
        s += alpha * ds;
        z += alpha * dz;
        s.iter_mut().for_each(|v| *v = v.max(1e-300));
        z.iter_mut().for_each(|v| *v = v.max(1e-300));
    }
    let viol = inf_norm(&(&qp.a * &x - &qp.b)).max((&qp.g * &x - &qp.d).iter().fold(0.0, |m, &v| m.max(v)));
    Err(Error::Infeasible { max_violation: viol })
}
