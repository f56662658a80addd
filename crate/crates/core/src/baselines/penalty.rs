//! Penalty-method AC-OPF used to label datasets.
//!
//! Decision variables are free angles (REF pinned to zero) and raw values
//! for `vm`, `pg`, `qg` mapped into their bounds by the same scaled sigmoid
//! the model uses. Branch flows are derived from the voltages. For each
//! penalty weight `rho` the objective
//!
//! ```text
//! cost / scale + rho * (sum p_mis^2 + sum q_mis^2 + sum thermal^2 + sum angle^2)
//! ```
//!
//! is minimized by L-BFGS followed by damped Newton steps, warm-started from
//! the previous stage. `scale` is
//! the largest marginal cost at `pmax`, which keeps multipliers near one.
//! A Gauss-Newton pass on the balance equations then removes the residual
//! mismatch left by the finite penalty, and a few SQP iterations in the
//! physical variables settle generators and voltages that rest on a limit.

use ndarray::Array2;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lbfgs::{minimize, LbfgsOptions};
use super::newton::{self, NewtonOptions};
use crate::autodiff::{Tape, Var};
use super::refine::Refiner;
use crate::constraints::{derive_branch_flows, objective_cost, violation_degrees, Family, ViolationReport};
use crate::error::{Error, Result};
use crate::gnn::physics::{bounded, branch_flows, bus_mismatch, violable_degrees, weighted_sum, PhysicsConsts};
use crate::grid::{Grid, OpfSolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub rho_schedule: Vec<f64>,
    /// L-BFGS iterations per penalty stage.
    pub inner_steps: usize,
    /// First trial step of each stage's line search.
    pub step_size: f64,
    /// Target for the largest balance degree.
    pub tol: f64,
    pub seed: u64,
    /// Newton iterations per stage, run after the L-BFGS iterations.
    pub newton_steps: usize,
    /// Gauss-Newton iterations on the balance equations after the stages.
    pub polish_steps: usize,
    /// SQP iterations in the physical variables at the end. Zero disables.
    pub refine_steps: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            rho_schedule: vec![1e1, 1e2, 1e3, 1e4, 1e5],
            inner_steps: 200,
            newton_steps: 0,
            step_size: 1e-2,
            tol: 1e-5,
            seed: 0,
            polish_steps: 20,
            refine_steps: 30,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = self.rho_schedule.windows(2).all(|w| w[1] > w[0]);
        if self.rho_schedule.is_empty() || !increasing || self.rho_schedule[0] <= 0.0 || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid penalty config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PenaltyResult {
    pub solution: OpfSolution,
    pub report: ViolationReport,
    pub converged: bool,
    pub objective: f64,
    pub max_balance: f64,
}

struct Problem {
    c: PhysicsConsts,
    nb: usize,
    ng: usize,
    scale: f64,
}

struct Decoded {
    va: Var,
    vm: Var,
    pg: Var,
    qg: Var,
    params: [Var; 4],
}

impl Problem {
    fn dim(&self) -> usize {
        2 * self.nb + 2 * self.ng
    }

    fn decode(&self, t: &mut Tape, x: &[f64]) -> Decoded {
        let (nb, ng) = (self.nb, self.ng);
        let col = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column");
        let pva = t.param(col(&x[..nb]));
        let pvm = t.param(col(&x[nb..2 * nb]));
        let ppg = t.param(col(&x[2 * nb..2 * nb + ng]));
        let pqg = t.param(col(&x[2 * nb + ng..]));
        let mask = t.column(&self.c.ref_mask);
        let va = t.mul(pva, mask);
        let vm = bounded(t, pvm, &self.c.vmin, &self.c.vmax);
        let pg = bounded(t, ppg, &self.c.pmin, &self.c.pmax);
        let qg = bounded(t, pqg, &self.c.qmin, &self.c.qmax);
        Decoded {
            va,
            vm,
            pg,
            qg,
            params: [pva, pvm, ppg, pqg],
        }
    }

    fn flatten(&self, t: &Tape, d: &Decoded, out: Var) -> Vec<f64> {
        let g = t.backward(out);
        let mut v = Vec::with_capacity(self.dim());
        for (p, n) in d.params.iter().zip([self.nb, self.nb, self.ng, self.ng]) {
            v.extend(g.get_or_zeros(*p, (n, 1)).iter().copied());
        }
        v
    }

    fn objective(&self, x: &[f64], rho: f64) -> (f64, Vec<f64>) {
        self.evaluate(x, rho, None)
    }

    /// Penalty objective, or with `lambda` the Lagrangian that prices the
    /// balance residuals linearly and keeps the inequality penalties.
    fn evaluate(&self, x: &[f64], rho: f64, lambda: Option<&[f64]>) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let d = self.decode(&mut t, x);
        let pg2 = t.square(d.pg);
        let quad = weighted_sum(&mut t, pg2, &self.c.gen_cost_c2);
        let lin = weighted_sum(&mut t, d.pg, &self.c.gen_cost_c1);
        let cost = t.add(quad, lin);
        let cost = t.scale(cost, 1.0 / self.scale);
        let f = branch_flows(&mut t, &self.c, d.va, d.vm);
        let deg = violable_degrees(&mut t, &self.c, d.va, d.vm, d.pg, d.qg, &f);
        let mut terms = vec![deg.angle_diff];
        terms.extend(deg.thermal_from);
        terms.extend(deg.thermal_to);
        if lambda.is_none() {
            terms.extend([deg.p_balance, deg.q_balance]);
        }
        let mut total = cost;
        for v in terms {
            let sq = t.square(v);
            let s = t.sum(sq);
            let s = t.scale(s, rho);
            total = t.add(total, s);
        }
        if let Some(l) = lambda {
            let (p, q) = bus_mismatch(&mut t, &self.c, d.vm, d.pg, d.qg, &f);
            let lp = weighted_sum(&mut t, p, &l[..self.nb]);
            let lq = weighted_sum(&mut t, q, &l[self.nb..]);
            total = t.add(total, lp);
            total = t.add(total, lq);
        }
        (t.scalar(total), self.flatten(&t, &d, total))
    }

    /// Balance residuals `[p; q]` and their Jacobian.
    fn balance_jacobian(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let mut t = Tape::new();
        let d = self.decode(&mut t, x);
        let f = branch_flows(&mut t, &self.c, d.va, d.vm);
        let (p, q) = bus_mismatch(&mut t, &self.c, d.vm, d.pg, d.qg, &f);
        let nb = self.nb;
        let mut r = DVector::zeros(2 * nb);
        let mut j = DMatrix::zeros(2 * nb, self.dim());
        for (side, v) in [p, q].into_iter().enumerate() {
            let vals = t.value(v).column(0).to_vec();
            for i in 0..nb {
                r[side * nb + i] = vals[i];
                let mut e = vec![0.0; nb];
                e[i] = 1.0;
                let row = weighted_sum(&mut t, v, &e);
                for (k, g) in self.flatten(&t, &d, row).into_iter().enumerate() {
                    j[(side * nb + i, k)] = g;
                }
            }
        }
        (r, j)
    }

    fn solution(&self, grid: &Grid, x: &[f64]) -> Result<OpfSolution> {
        let mut t = Tape::new();
        let d = self.decode(&mut t, x);
        let col = |v: Var| t.value(v).column(0).to_vec();
        let (va, vm, pg, qg) = (col(d.va), col(d.vm), col(d.pg), col(d.qg));
        let flows = derive_branch_flows(grid, &va, &vm)?;
        Ok(OpfSolution {
            va,
            vm,
            pg,
            qg,
            pf: flows.pf,
            qf: flows.qf,
            pt: flows.pt,
            qt: flows.qt,
        })
    }
}

fn inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimum-norm Gauss-Newton steps on the balance equations.
fn polish(prob: &Problem, mut x: Vec<f64>, steps: usize, tol: f64) -> Vec<f64> {
    for _ in 0..steps {
        let (r, j) = prob.balance_jacobian(&x);
        let norm = inf(&r);
        if norm <= 1e-3 * tol {
            break;
        }
        let mut jjt = &j * j.transpose();
        for i in 0..jjt.nrows() {
            jjt[(i, i)] += 1e-14;
        }
        let Some(w) = jjt.lu().solve(&r) else { break };
        let dx = j.transpose() * w;
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let xn: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a - step * d).collect();
            let rn = prob.balance(&xn);
            if inf(&rn) < norm {
                x = xn;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    x
}

impl Problem {
    fn balance(&self, x: &[f64]) -> DVector<f64> {
        let mut t = Tape::new();
        let d = self.decode(&mut t, x);
        let f = branch_flows(&mut t, &self.c, d.va, d.vm);
        let (p, q) = bus_mismatch(&mut t, &self.c, d.vm, d.pg, d.qg, &f);
        let mut r: Vec<f64> = t.value(p).column(0).to_vec();
        r.extend(t.value(q).column(0).iter().copied());
        DVector::from_vec(r)
    }
}

/// Solve AC-OPF on `grid` by penalty continuation.
///
/// When the balance target is not met the best iterate is returned with
/// `converged = false`.
pub fn solve_acopf_penalty(grid: &Grid, cfg: &PenaltyConfig) -> Result<PenaltyResult> {
    cfg.validate()?;
    let c = PhysicsConsts::new(&[grid])?;
    let (nb, ng) = (c.n_bus, c.n_gen);
    let scale = grid
        .generators
        .iter()
        .map(|g| g.cost_linear.abs() + 2.0 * g.cost_squared.abs() * g.pmax.abs())
        .fold(0.0, f64::max);
    let prob = Problem {
        c,
        nb,
        ng,
        scale: if scale > 0.0 { scale } else { 1.0 },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<f64> = (0..prob.dim())
        .map(|i| if i < nb { 0.0 } else { rng.random_range(-0.5..0.5) })
        .collect();
    let opts = LbfgsOptions {
        max_iter: cfg.inner_steps,
        initial_step: cfg.step_size,
        gtol: 1e-12,
        ..LbfgsOptions::default()
    };
    let nopts = NewtonOptions {
        max_iter: cfg.newton_steps,
        gtol: 1e-12,
        ..NewtonOptions::default()
    };
    for &rho in &cfg.rho_schedule {
        x = minimize(|x| prob.objective(x, rho), x, &opts).x;
        let r = newton::minimize(|x| prob.objective(x, rho), x, &nopts);
        x = r.x;
        if inf(&prob.balance(&x)) <= 1e-3 * cfg.tol {
            break;
        }
    }
    let x = polish(&prob, x, cfg.polish_steps, cfg.tol);
    let mut solution = prob.solution(grid, &x)?;
    let mut report = violation_degrees(grid, &solution)?;
    if cfg.refine_steps > 0 {
        let refiner = Refiner { c: &prob.c, scale: prob.scale };
        let z: Vec<f64> = [&solution.va, &solution.vm, &solution.pg, &solution.qg]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        let z = refiner.run(z, cfg.refine_steps);
        let (nb, ng) = (prob.nb, prob.ng);
        let flows = derive_branch_flows(grid, &z[..nb], &z[nb..2 * nb])?;
        let refined = OpfSolution {
            va: z[..nb].to_vec(),
            vm: z[nb..2 * nb].to_vec(),
            pg: z[2 * nb..2 * nb + ng].to_vec(),
            qg: z[2 * nb + ng..].to_vec(),
            pf: flows.pf,
            qf: flows.qf,
            pt: flows.pt,
            qt: flows.qt,
        };
        let refined_report = violation_degrees(grid, &refined)?;
        let worst = |r: &ViolationReport| {
            [Family::ThermalFrom, Family::ThermalTo, Family::AngleDiff]
                .into_iter()
                .filter_map(|f| r.max(f))
                .fold(0.0, f64::max)
        };
        if refined_report.max_balance() <= cfg.tol && worst(&refined_report) <= worst(&report).max(cfg.tol) {
            solution = refined;
            report = refined_report;
        }
    }
    let max_balance = report.max_balance();
    Ok(PenaltyResult {
        objective: objective_cost(grid, &solution),
        converged: max_balance <= cfg.tol,
        max_balance,
        solution,
        report,
    })
}

/// Label a grid, failing when the balance target is missed.
pub fn label(grid: &Grid, cfg: &PenaltyConfig) -> Result<OpfSolution> {
    let r = solve_acopf_penalty(grid, cfg)?;
    if !r.converged {
        return Err(Error::Solver(format!("max balance degree {:.3e} above {:.1e}", r.max_balance, cfg.tol)));
    }
    Ok(r.solution)
}
