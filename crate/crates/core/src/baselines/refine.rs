//! SQP refinement of an AC-OPF point in the physical variables.
//!
//! Works on `z = [va; vm; pg; qg]` with bounds as explicit box rows, so
//! generators and voltages resting on a limit are handled exactly. Each
//! iteration solves a convex QP built from the balance and thermal
//! linearizations and a Lagrangian Hessian taken from gradient differences.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use super::qp::{solve_qp, Qp, QpOptions};
use crate::autodiff::{Tape, Var};
use crate::gnn::physics::{branch_flows, bus_mismatch, weighted_sum, PhysicsConsts};

pub(crate) struct Refiner<'a> {
    pub c: &'a PhysicsConsts,
    /// Divides the generation cost.
    pub scale: f64,
}

struct Built {
    params: [Var; 4],
    cost: Var,
    p: Var,
    q: Var,
    /// `|S|^2 - rate^2` at the from and to ends of rated branches.
    thermal: Option<(Var, Var)>,
}

fn inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl Refiner<'_> {
    fn n(&self) -> usize {
        2 * self.c.n_bus + 2 * self.c.n_gen
    }

    fn n_rated(&self) -> usize {
        self.c.rated.len()
    }

    fn build(&self, t: &mut Tape, z: &[f64]) -> Built {
        let (nb, ng) = (self.c.n_bus, self.c.n_gen);
        let col = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column");
        let va = t.param(col(&z[..nb]));
        let vm = t.param(col(&z[nb..2 * nb]));
        let pg = t.param(col(&z[2 * nb..2 * nb + ng]));
        let qg = t.param(col(&z[2 * nb + ng..]));
        let pg2 = t.square(pg);
        let quad = weighted_sum(t, pg2, &self.c.gen_cost_c2);
        let lin = weighted_sum(t, pg, &self.c.gen_cost_c1);
        let cost = t.add(quad, lin);
        let cost = t.scale(cost, 1.0 / self.scale);
        let f = branch_flows(t, self.c, va, vm);
        let (p, q) = bus_mismatch(t, self.c, vm, pg, qg, &f);
        let thermal = (!self.c.rated.is_empty()).then(|| {
            let limit2: Vec<f64> = self.c.rate.iter().map(|r| r * r).collect();
            let mut side = |a: Var, b: Var, idx: &Arc<Vec<usize>>| {
                let a = t.gather_rows(a, idx);
                let b = t.gather_rows(b, idx);
                let a2 = t.square(a);
                let b2 = t.square(b);
                let s2 = t.add(a2, b2);
                let l = t.column(&limit2);
                t.sub(s2, l)
            };
            let from = side(f.pf, f.qf, &self.c.rated);
            let to = side(f.pt, f.qt, &self.c.rated);
            (from, to)
        });
        Built {
            params: [va, vm, pg, qg],
            cost,
            p,
            q,
            thermal,
        }
    }

    fn grad(&self, t: &Tape, b: &Built, out: Var) -> Vec<f64> {
        let g = t.backward(out);
        let (nb, ng) = (self.c.n_bus, self.c.n_gen);
        let mut v = Vec::with_capacity(self.n());
        for (p, n) in b.params.iter().zip([nb, nb, ng, ng]) {
            v.extend(g.get_or_zeros(*p, (n, 1)).iter().copied());
        }
        v
    }

    /// Cost, balance residuals and thermal values.
    fn values(&self, z: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let b = self.build(&mut t, z);
        let mut r = t.value(b.p).column(0).to_vec();
        r.extend(t.value(b.q).column(0).iter().copied());
        let mut c = Vec::new();
        if let Some((f, to)) = b.thermal {
            c.extend(t.value(f).column(0).iter().copied());
            c.extend(t.value(to).column(0).iter().copied());
        }
        (t.scalar(b.cost), r, c)
    }

    /// Gradient of `cost + y'r + w'c`.
    fn lagrangian_grad(&self, z: &[f64], y: &[f64], w: &[f64]) -> Vec<f64> {
        let nb = self.c.n_bus;
        let nr = self.n_rated();
        let mut t = Tape::new();
        let b = self.build(&mut t, z);
        let mut total = b.cost;
        let lp = weighted_sum(&mut t, b.p, &y[..nb]);
        let lq = weighted_sum(&mut t, b.q, &y[nb..]);
        total = t.add(total, lp);
        total = t.add(total, lq);
        if let Some((f, to)) = b.thermal {
            let lf = weighted_sum(&mut t, f, &w[..nr]);
            let lt = weighted_sum(&mut t, to, &w[nr..]);
            total = t.add(total, lf);
            total = t.add(total, lt);
        }
        self.grad(&t, &b, total)
    }

    /// Cost gradient and the Jacobians of the balance and thermal rows.
    fn jacobians(&self, z: &[f64]) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.n();
        let nb = self.c.n_bus;
        let nr = self.n_rated();
        let mut t = Tape::new();
        let b = self.build(&mut t, z);
        let gc = self.grad(&t, &b, b.cost);
        let rows = |t: &mut Tape, vars: &[(Var, usize)]| {
            let m: usize = vars.iter().map(|v| v.1).sum();
            let mut j = DMatrix::zeros(m, n);
            let mut r = 0;
            for &(v, len) in vars {
                for i in 0..len {
                    let mut e = vec![0.0; len];
                    e[i] = 1.0;
                    let out = weighted_sum(t, v, &e);
                    for (k, g) in self.grad(t, &b, out).into_iter().enumerate() {
                        j[(r, k)] = g;
                    }
                    r += 1;
                }
            }
            j
        };
        let jr = rows(&mut t, &[(b.p, nb), (b.q, nb)]);
        let jc = match b.thermal {
            Some((f, to)) => rows(&mut t, &[(f, nr), (to, nr)]),
            None => DMatrix::zeros(0, n),
        };
        (gc, jr, jc)
    }

    fn hessian(&self, z: &[f64], y: &[f64], w: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut h = DMatrix::zeros(n, n);
        let mut zp = z.to_vec();
        for c in 0..n {
            let step = 1e-6 * (1.0 + z[c].abs());
            zp[c] = z[c] + step;
            let gp = self.lagrangian_grad(&zp, y, w);
            zp[c] = z[c] - step;
            let gm = self.lagrangian_grad(&zp, y, w);
            zp[c] = z[c];
            for i in 0..n {
                h[(i, c)] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        // Replace each eigenvalue by its magnitude, with a floor.
        let eig = SymmetricEigen::new(h);
        let top = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let vals = eig.eigenvalues.map(|v| v.abs().max(1e-8 * top));
        &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.c;
        let mut lo = vec![f64::NEG_INFINITY; c.n_bus];
        let mut hi = vec![f64::INFINITY; c.n_bus];
        lo.extend(c.vmin.iter().chain(&c.pmin).chain(&c.qmin));
        hi.extend(c.vmax.iter().chain(&c.pmax).chain(&c.qmax));
        for i in 0..c.n_bus {
            if c.ref_mask[i] == 0.0 {
                lo[i] = 0.0;
                hi[i] = 0.0;
            }
        }
        (lo, hi)
    }

    fn merit(&self, z: &[f64], mu: f64) -> f64 {
        let (cost, r, c) = self.values(z);
        cost + mu * (r.iter().map(|v| v.abs()).sum::<f64>() + c.iter().map(|v| v.max(0.0)).sum::<f64>())
    }

    /// Refine `z`. Returns the final point; it is never less bounded than
    /// the input since every iterate is clamped to the boxes.
    pub fn run(&self, mut z: Vec<f64>, max_iter: usize) -> Vec<f64> {
        let n = self.n();
        let nb = self.c.n_bus;
        let nr = self.n_rated();
        let (lo, hi) = self.bounds();
        let clamp = |z: &mut Vec<f64>| {
            for i in 0..n {
                z[i] = z[i].clamp(lo[i], hi[i]);
            }
        };
        clamp(&mut z);

        // Least-squares balance multipliers to start.
        let (gc, jr, _) = self.jacobians(&z);
        let mut jjt = &jr * jr.transpose();
        for i in 0..2 * nb {
            jjt[(i, i)] += 1e-14;
        }
        let mut y = jjt
            .lu()
            .solve(&(-(&jr * DVector::from_vec(gc))))
            .map(|v| v.as_slice().to_vec())
            .unwrap_or_else(|| vec![0.0; 2 * nb]);
        let mut w = vec![0.0; 2 * nr];
        let mut mu: f64 = 1.0;

        for _ in 0..max_iter {
            let (_, r, c) = self.values(&z);
            let (gc, jr, jc) = self.jacobians(&z);
            let h = self.hessian(&z, &y, &w);

            // Equalities: balance, then fixed coordinates.
            let fixed: Vec<usize> = (0..n).filter(|&i| hi[i] - lo[i] <= 1e-12).collect();
            let me = 2 * nb + fixed.len();
            let mut a = DMatrix::zeros(me, n);
            let mut bvec = DVector::zeros(me);
            a.view_mut((0, 0), (2 * nb, n)).copy_from(&jr);
            for i in 0..2 * nb {
                bvec[i] = -r[i];
            }
            for (k, &i) in fixed.iter().enumerate() {
                a[(2 * nb + k, i)] = 1.0;
                bvec[2 * nb + k] = lo[i] - z[i];
            }

            // Inequalities: thermal, angle differences, boxes.
            let nbr = self.c.br_from.len();
            let free: Vec<usize> = (nb..n).filter(|i| !fixed.contains(i)).collect();
            let mi = 2 * nr + 2 * nbr + 2 * free.len();
            let mut g = DMatrix::zeros(mi, n);
            let mut d = DVector::zeros(mi);
            g.view_mut((0, 0), (2 * nr, n)).copy_from(&jc);
            for i in 0..2 * nr {
                d[i] = -c[i];
            }
            let mut row = 2 * nr;
            for k in 0..nbr {
                let (f, t) = (self.c.br_from[k], self.c.br_to[k]);
                let diff = z[f] - z[t];
                g[(row, f)] = 1.0;
                g[(row, t)] = -1.0;
                d[row] = self.c.angmax[k] - diff;
                g[(row + 1, f)] = -1.0;
                g[(row + 1, t)] = 1.0;
                d[row + 1] = diff - self.c.angmin[k];
                row += 2;
            }
            for &i in &free {
                g[(row, i)] = 1.0;
                d[row] = hi[i] - z[i];
                g[(row + 1, i)] = -1.0;
                d[row + 1] = z[i] - lo[i];
                row += 2;
            }

            let qp = Qp {
                h,
                c: DVector::from_vec(gc.clone()),
                a,
                b: bvec,
                g,
                d,
            };
            let Ok(sol) = solve_qp(&qp, &QpOptions { tol: 1e-12, max_iter: 200 }) else { break };
            let step = sol.x;
            let y_new: Vec<f64> = sol.y.rows(0, 2 * nb).iter().copied().collect();
            let w_new: Vec<f64> = sol.z.rows(0, 2 * nr).iter().copied().collect();
            mu = mu.max(2.0 * inf(&y_new).max(inf(&w_new)));

            let base = self.merit(&z, mu);
            let infeas = r.iter().map(|v| v.abs()).sum::<f64>() + c.iter().map(|v| v.max(0.0)).sum::<f64>();
            let slope = DVector::from_vec(gc).dot(&step) - mu * infeas;
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let mut zn: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
                clamp(&mut zn);
                if self.merit(&zn, mu) <= base + 1e-4 * alpha * slope.min(0.0) {
                    accepted = Some(zn);
                    break;
                }
                alpha *= 0.5;
            }
            let size = inf(step.as_slice());
            match accepted {
                Some(zn) => z = zn,
                None if size < 1e-7 => {
                    let mut zn: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                    clamp(&mut zn);
                    z = zn;
                }
                None => break,
            }
            y = y_new;
            w = w_new;
            let (_, r, _) = self.values(&z);
            if size <= 1e-10 || (size <= 1e-8 && inf(&r) <= 1e-12) {
                break;
            }
        }
        z
    }
}
