//! DC optimal power flow in the B-theta form.
//!
//! Branch `k` carries `p_k = b_k (theta_f - theta_t - shift_k)` with
//! `b_k = 1 / (x_k tap_k)`. Bus shunt conductances are served as constant
//! demand at unit voltage. Constraints: nodal balance, REF angles at zero,
//! generator real-power bounds, `|p_k| <= rate_a` on rated branches and
//! angle-difference bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::qp::{solve_qp, Qp, QpOptions};
use crate::acpf::{restore, PfResult};
use crate::error::{Error, Result};
use crate::grid::{BusType, Grid, OpfSolution, Topology};

/// Multipliers of every DC constraint, on the Lagrangian
/// `cost + sum y (lhs - rhs) + sum z (g(x) - bound)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcDuals {
    /// Per bus, on `generation - withdrawals - demand = 0`.
    pub balance: Vec<f64>,
    /// Per bus; nonzero only at REF buses.
    pub reference: Vec<f64>,
    /// Per generator; used instead of the bounds when `pmin == pmax`.
    pub fixed: Vec<f64>,
    pub pg_upper: Vec<f64>,
    pub pg_lower: Vec<f64>,
    /// Per branch; zero for unrated branches.
    pub flow_upper: Vec<f64>,
    pub flow_lower: Vec<f64>,
    pub angle_upper: Vec<f64>,
    pub angle_lower: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcSolution {
    pub pg: Vec<f64>,
    pub va: Vec<f64>,
    /// Always 1.0.
    pub vm: Vec<f64>,
    /// From-end flow per branch; the to-end flow is its negation.
    pub pf: Vec<f64>,
    pub objective: f64,
    pub duals: DcDuals,
    pub iterations: usize,
}

/// Series susceptance and shift of every branch.
pub fn dc_branch_params(grid: &Grid) -> Result<Vec<(f64, f64)>> {
    grid.branches
        .iter()
        .map(|br| {
            if br.br_x == 0.0 {
                return Err(Error::DegenerateBranch(br.id));
            }
            Ok((1.0 / (br.br_x * br.tap), br.shift))
        })
        .collect()
}

fn check_active(grid: &Grid, topo: &Topology) -> Result<()> {
    if topo.bus_active.iter().any(|a| !a) {
        return Err(Error::InvalidGrid("DC-OPF needs a grid without inactive buses".into()));
    }
    if topo.ref_buses.is_empty() {
        return Err(Error::NoReferenceBus);
    }
    if let Some(g) = grid.generators.iter().find(|g| g.cost_squared < 0.0) {
        return Err(Error::InvalidGrid(format!("generator {} has a concave cost", g.id)));
    }
    Ok(())
}

enum Row {
    Balance(usize),
    Reference(usize),
    Fixed(usize),
    PgUpper(usize),
    PgLower(usize),
    FlowUpper(usize),
    FlowLower(usize),
    AngleUpper(usize),
    AngleLower(usize),
}

pub fn solve_dcopf(grid: &Grid) -> Result<DcSolution> {
    solve_dcopf_with(grid, &QpOptions::default())
}

pub fn solve_dcopf_with(grid: &Grid, opts: &QpOptions) -> Result<DcSolution> {
    let topo = grid.topology()?;
    check_active(grid, &topo)?;
    let ng = grid.generators.len();
    let nb = topo.n_bus;
    let nx = ng + nb;
    let th = |i: usize| ng + i;
    let params = dc_branch_params(grid)?;

    let mut h = DMatrix::zeros(nx, nx);
    let mut c = DVector::zeros(nx);
    for (k, g) in grid.generators.iter().enumerate() {
        h[(k, k)] = 2.0 * g.cost_squared;
        c[k] = g.cost_linear;
    }

    let mut eq_rows: Vec<(Vec<(usize, f64)>, f64, Row)> = Vec::new();
    let mut rhs = vec![0.0; nb];
    let mut coef: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nb];
    for (l, &i) in grid.loads.iter().zip(&topo.load_bus) {
        rhs[i] += l.pd;
    }
    for (s, &i) in grid.shunts.iter().zip(&topo.shunt_bus) {
        rhs[i] += s.gs;
    }
    for (k, &i) in topo.gen_bus.iter().enumerate() {
        coef[i].push((k, 1.0));
    }
    for (k, &(b, shift)) in params.iter().enumerate() {
        if !topo.branch_active(k) {
            continue;
        }
        let (f, t) = (topo.branch_from[k], topo.branch_to[k]);
        coef[f].push((th(f), -b));
        coef[f].push((th(t), b));
        coef[t].push((th(f), b));
        coef[t].push((th(t), -b));
        rhs[f] -= b * shift;
        rhs[t] += b * shift;
    }
    for i in 0..nb {
        eq_rows.push((std::mem::take(&mut coef[i]), rhs[i], Row::Balance(i)));
    }
    for &r in &topo.ref_buses {
        eq_rows.push((vec![(th(r), 1.0)], 0.0, Row::Reference(r)));
    }
    let mut in_rows: Vec<(Vec<(usize, f64)>, f64, Row)> = Vec::new();
    for (k, g) in grid.generators.iter().enumerate() {
        if g.pmin == g.pmax {
            eq_rows.push((vec![(k, 1.0)], g.pmin, Row::Fixed(k)));
        } else {
            in_rows.push((vec![(k, 1.0)], g.pmax, Row::PgUpper(k)));
            in_rows.push((vec![(k, -1.0)], -g.pmin, Row::PgLower(k)));
        }
    }
    for (k, (&(b, shift), br)) in params.iter().zip(&grid.branches).enumerate() {
        if !topo.branch_active(k) {
            continue;
        }
        let (f, t) = (th(topo.branch_from[k]), th(topo.branch_to[k]));
        if let Some(rate) = br.thermal_limit() {
            in_rows.push((vec![(f, b), (t, -b)], rate + b * shift, Row::FlowUpper(k)));
            in_rows.push((vec![(f, -b), (t, b)], rate - b * shift, Row::FlowLower(k)));
        }
        in_rows.push((vec![(f, 1.0), (t, -1.0)], br.angmax, Row::AngleUpper(k)));
        in_rows.push((vec![(f, -1.0), (t, 1.0)], -br.angmin, Row::AngleLower(k)));
    }
    let assemble = |rows: &[(Vec<(usize, f64)>, f64, Row)]| {
        let mut m = DMatrix::zeros(rows.len(), nx);
        let mut v = DVector::zeros(rows.len());
        for (r, (entries, rhs, _)) in rows.iter().enumerate() {
            for &(j, a) in entries {
                m[(r, j)] += a;
            }
            v[r] = *rhs;
        }
        (m, v)
    };
    let (a, b) = assemble(&eq_rows);
    let (g, d) = assemble(&in_rows);
    let qp = Qp { h, c, a, b, g, d };
    let sol = solve_qp(&qp, opts)?;

    let nbr = grid.branches.len();
    let mut duals = DcDuals {
        balance: vec![0.0; nb],
        reference: vec![0.0; nb],
        fixed: vec![0.0; ng],
        pg_upper: vec![0.0; ng],
        pg_lower: vec![0.0; ng],
        flow_upper: vec![0.0; nbr],
        flow_lower: vec![0.0; nbr],
        angle_upper: vec![0.0; nbr],
        angle_lower: vec![0.0; nbr],
    };
    for ((_, _, row), &y) in eq_rows.iter().zip(sol.y.iter()) {
        match *row {
            Row::Balance(i) => duals.balance[i] = y,
            Row::Reference(i) => duals.reference[i] = y,
            Row::Fixed(k) => duals.fixed[k] = y,
            _ => unreachable!(),
        }
    }
    for ((_, _, row), &z) in in_rows.iter().zip(sol.z.iter()) {
        match *row {
            Row::PgUpper(k) => duals.pg_upper[k] = z,
            Row::PgLower(k) => duals.pg_lower[k] = z,
            Row::FlowUpper(k) => duals.flow_upper[k] = z,
            Row::FlowLower(k) => duals.flow_lower[k] = z,
            Row::AngleUpper(k) => duals.angle_upper[k] = z,
            Row::AngleLower(k) => duals.angle_lower[k] = z,
            _ => unreachable!(),
        }
    }
    let pg: Vec<f64> = sol.x.rows(0, ng).iter().copied().collect();
    let va: Vec<f64> = sol.x.rows(ng, nb).iter().copied().collect();
    let pf = dc_flows(grid, &topo, &params, &va);
    let objective = grid
        .generators
        .iter()
        .zip(&pg)
        .map(|(g, p)| g.cost_squared * p * p + g.cost_linear * p)
        .sum();
    Ok(DcSolution {
        pg,
        va,
        vm: vec![1.0; nb],
        pf,
        objective,
        duals,
        iterations: sol.iterations,
    })
}

fn dc_flows(grid: &Grid, topo: &Topology, params: &[(f64, f64)], va: &[f64]) -> Vec<f64> {
    (0..grid.branches.len())
        .map(|k| {
            if !topo.branch_active(k) {
                return 0.0;
            }
            let (b, shift) = params[k];
            b * (va[topo.branch_from[k]] - va[topo.branch_to[k]] - shift)
        })
        .collect()
}

/// Optimality residuals of a DC solution, evaluated term by term from the
/// grid data rather than from the assembled QP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcKkt {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual_sign: f64,
}

impl DcKkt {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity).max(self.dual_sign)
    }
}

pub fn dc_kkt_residuals(grid: &Grid, sol: &DcSolution) -> Result<DcKkt> {
    let topo = grid.topology()?;
    let params = dc_branch_params(grid)?;
    let d = &sol.duals;
    let nb = topo.n_bus;
    let mut grad_pg: Vec<f64> = grid
        .generators
        .iter()
        .zip(&sol.pg)
        .map(|(g, p)| 2.0 * g.cost_squared * p + g.cost_linear)
        .collect();
    let mut grad_th = vec![0.0; nb];
    let mut primal: f64 = 0.0;
    let mut compl: f64 = 0.0;
    let mut sign: f64 = 0.0;
    let mut ineq = |z: f64, slack: f64, primal: &mut f64| {
        *primal = primal.max(slack);
        compl = compl.max((z * slack).abs());
        sign = sign.max(-z);
    };

    let mut balance = vec![0.0; nb];
    for (k, g) in grid.generators.iter().enumerate() {
        let i = topo.gen_bus[k];
        balance[i] += sol.pg[k];
        grad_pg[k] += d.balance[i];
        if g.pmin == g.pmax {
            grad_pg[k] += d.fixed[k];
            primal = primal.max((sol.pg[k] - g.pmin).abs());
        } else {
            grad_pg[k] += d.pg_upper[k] - d.pg_lower[k];
            ineq(d.pg_upper[k], sol.pg[k] - g.pmax, &mut primal);
            ineq(d.pg_lower[k], g.pmin - sol.pg[k], &mut primal);
        }
    }
    for (l, &i) in grid.loads.iter().zip(&topo.load_bus) {
        balance[i] -= l.pd;
    }
    for (s, &i) in grid.shunts.iter().zip(&topo.shunt_bus) {
        balance[i] -= s.gs;
    }
    for (k, br) in grid.branches.iter().enumerate() {
        if !topo.branch_active(k) {
            continue;
        }
        let (b, shift) = params[k];
        let (f, t) = (topo.branch_from[k], topo.branch_to[k]);
        let diff = sol.va[f] - sol.va[t];
        let p = b * (diff - shift);
        balance[f] -= p;
        balance[t] += p;
        // d(balance_f)/d(theta_f) = -b, d(balance_t)/d(theta_f) = +b.
        grad_th[f] += b * (d.balance[t] - d.balance[f]);
        grad_th[t] += b * (d.balance[f] - d.balance[t]);
        if let Some(rate) = br.thermal_limit() {
            let zf = d.flow_upper[k] - d.flow_lower[k];
            grad_th[f] += b * zf;
            grad_th[t] -= b * zf;
            ineq(d.flow_upper[k], p - rate, &mut primal);
            ineq(d.flow_lower[k], -p - rate, &mut primal);
        }
        let za = d.angle_upper[k] - d.angle_lower[k];
        grad_th[f] += za;
        grad_th[t] -= za;
        ineq(d.angle_upper[k], diff - br.angmax, &mut primal);
        ineq(d.angle_lower[k], br.angmin - diff, &mut primal);
    }
    for (i, bus) in grid.buses.iter().enumerate() {
        if bus.bus_type == BusType::Ref {
            grad_th[i] += d.reference[i];
            primal = primal.max(sol.va[i].abs());
        }
    }
    primal = balance.iter().fold(primal, |m, v| m.max(v.abs()));
    let stationarity = grad_pg.iter().chain(&grad_th).fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(DcKkt {
        stationarity,
        primal,
        complementarity: compl,
        dual_sign: sign,
    })
}

impl DcSolution {
    /// The DC dispatch as a starting point for AC power flow: unit voltage
    /// magnitudes, DC angles, zero reactive output, flows derived from the
    /// voltages.
    pub fn to_ac_start(&self, grid: &Grid) -> Result<OpfSolution> {
        let mut s = OpfSolution::zeros(grid);
        s.va = self.va.clone();
        s.vm = self.vm.clone();
        s.pg = self.pg.clone();
        s.with_derived_flows(grid)
    }
}

/// Turn a DC dispatch into a full AC solution by power flow. Non-slack
/// generators keep the DC `pg`; REF generators absorb the losses.
pub fn complete_dc_solution(grid: &Grid, dc: &DcSolution) -> Result<PfResult> {
    restore(grid, &dc.to_ac_start(grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_case;
    use crate::cases;

    fn two_bus(x: f64, pd: f64) -> Grid {
        let mut g = parse_case(cases::CASE9).unwrap();
        g.buses.truncate(2);
        g.buses[1].bus_type = BusType::Pq;
        g.generators.truncate(1);
        g.generators[0].cost_squared = 0.0;
        g.generators[0].cost_linear = 10.0;
        g.loads = vec![crate::grid::Load { id: 1, bus: 2, pd, qd: 0.0 }];
        g.shunts.clear();
        let mut br = g.branches[0].clone();
        br.from_bus = 1;
        br.to_bus = 2;
        br.br_r = 0.0;
        br.br_x = x;
        br.b_fr = 0.0;
        br.b_to = 0.0;
        g.branches = vec![br];
        g
    }

    #[test]
    fn single_generator_serves_the_load() {
        let g = two_bus(0.1, 0.5);
        let s = solve_dcopf(&g).unwrap();
        assert!((s.pg[0] - 0.5).abs() < 1e-8);
        assert!((s.va[1] + 0.05).abs() < 1e-8);
        assert!(dc_kkt_residuals(&g, &s).unwrap().max() < 1e-6);
    }

    #[test]
    fn identical_generators_split_evenly() {
        let mut g = two_bus(0.1, 0.8);
        let mut second = g.generators[0].clone();
        second.id = 2;
        second.bus = 2;
        g.buses[1].bus_type = BusType::Pv;
        g.generators.push(second);
        for gen in &mut g.generators {
            gen.cost_squared = 5.0;
        }
        let s = solve_dcopf(&g).unwrap();
        assert!((s.pg[0] - s.pg[1]).abs() < 1e-8);
        assert!((s.pg[0] - 0.4).abs() < 1e-8);
    }

    #[test]
    fn case14_kkt_and_antisymmetry() {
        let g = parse_case(cases::CASE14).unwrap();
        let s = solve_dcopf(&g).unwrap();
        let kkt = dc_kkt_residuals(&g, &s).unwrap();
        assert!(kkt.max() <= 1e-6, "{kkt:?}");
    }

    #[test]
    fn completion_absorbs_losses_at_the_slack() {
        let g = parse_case(cases::CASE14).unwrap();
        let s = solve_dcopf(&g).unwrap();
        let pf = complete_dc_solution(&g, &s).unwrap();
        assert!(pf.converged);
        let sol = &pf.solution;
        let (pd, _) = g.total_load();
        let topo = g.topology().unwrap();
        let shunt: f64 = g.shunts.iter().zip(&topo.shunt_bus).map(|(sh, &i)| sh.gs * sol.vm[i] * sol.vm[i]).sum();
        let losses: f64 = sol.pf.iter().zip(&sol.pt).map(|(a, b)| a + b).sum();
        let gen: f64 = sol.pg.iter().sum();
        assert!((gen - pd - shunt - losses).abs() <= 1e-8);
        assert!(losses > 0.0);
    }
}
