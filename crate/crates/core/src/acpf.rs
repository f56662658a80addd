//! Newton-Raphson AC power flow with reactive-limit enforcement.
//!
//! Used to turn an approximate dispatch (model output or DC-OPF) into a
//! physically consistent operating point: non-slack real power and PV
//! voltage set points are held, the slack bus absorbs losses, and PV buses
//! whose generators hit a reactive limit are clamped and converted to PQ.
//!
//! Buses are classified as slack (every REF bus), PV (any other active bus
//! with at least one generator) and PQ (the rest). Inactive buses and the
//! branches touching them take no part in the solve.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constraints::derive_branch_flows;
use crate::error::{Error, Result};
use crate::grid::{branch_pi_params, BusType, Grid, OpfSolution};

/// Sparse bus admittance matrix stored by rows with sorted columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Ybus {
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl Ybus {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|p| self.rows[i][p].1)
            .unwrap_or_default()
    }

    pub fn mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, y)| y * v[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let n = self.n();
        let mut out = vec![vec![Complex64::default(); n]; n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, y) in row {
                out[i][j] = y;
            }
        }
        out
    }
}

/// Assemble the bus admittance matrix in grid bus order.
pub fn build_ybus(grid: &Grid) -> Result<Ybus> {
    let topo = grid.topology()?;
    let mut rows: Vec<BTreeMap<usize, Complex64>> = vec![BTreeMap::new(); topo.n_bus];
    let mut add = |i: usize, j: usize, y: Complex64| *rows[i].entry(j).or_default() += y;
    for (k, br) in grid.branches.iter().enumerate() {
        if !topo.branch_active(k) {
            continue;
        }
        let pi = branch_pi_params(br)?;
        let (f, t) = (topo.branch_from[k], topo.branch_to[k]);
        add(f, f, (pi.y + pi.yc_fr) / pi.t.norm_sqr());
        add(f, t, -pi.y / pi.t.conj());
        add(t, f, -pi.y / pi.t);
        add(t, t, pi.y + pi.yc_to);
    }
    for (s, &b) in grid.shunts.iter().zip(&topo.shunt_bus) {
        if topo.bus_active[b] {
            add(b, b, Complex64::new(s.gs, s.bs));
        }
    }
    Ok(Ybus {
        rows: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
    })
}

/// Net complex injection `V .* conj(Ybus V)` at every bus.
pub fn bus_injections(ybus: &Ybus, va: &[f64], vm: &[f64]) -> Vec<Complex64> {
    let v: Vec<Complex64> = vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
    ybus.mul(&v)
        .iter()
        .zip(&v)
        .map(|(i, v)| v * i.conj())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_outer: usize,
    pub enforce_q_lims: bool,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions {
            tol: 1e-8,
            max_iter: 30,
            max_outer: 10,
            enforce_q_lims: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfResult {
    pub converged: bool,
    /// Newton iterations summed over all outer passes.
    pub iterations: usize,
    /// Largest Newton iteration count of a single inner solve.
    pub max_inner_iterations: usize,
    /// Re-solves triggered by reactive-limit conversions.
    pub outer_iterations: usize,
    /// Largest active/reactive mismatch at the final iterate.
    pub mismatch: f64,
    pub solution: OpfSolution,
    /// Ids of PV buses converted to PQ.
    pub limited_buses: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Share `total` among units with bounds `lo`/`hi` in proportion to their
/// ranges. Units with no range get an equal share when all ranges are zero.
pub fn proportional_share(total: f64, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = lo.len();
    if n == 0 {
        return Vec::new();
    }
    let sum_lo: f64 = lo.iter().sum();
    let sum_range: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).sum();
    if sum_range > 0.0 && sum_range.is_finite() {
        let alpha = (total - sum_lo) / sum_range;
        lo.iter().zip(hi).map(|(l, h)| l + alpha * (h - l)).collect()
    } else {
        vec![total / n as f64; n]
    }
}

struct Newton {
    converged: bool,
    iterations: usize,
    mismatch: f64,
    message: Option<String>,
}

fn mismatch(ybus: &Ybus, va: &[f64], vm: &[f64], sbus: &[Complex64], pvpq: &[usize], pq: &[usize]) -> Vec<f64> {
    let s = bus_injections(ybus, va, vm);
    pvpq.iter()
        .map(|&i| s[i].re - sbus[i].re)
        .chain(pq.iter().map(|&i| s[i].im - sbus[i].im))
        .collect()
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) })
}

/// Polar Jacobian of the mismatch vector with respect to `[va[pvpq]; vm[pq]]`.
fn jacobian(ybus: &Ybus, va: &[f64], vm: &[f64], pvpq: &[usize], pq: &[usize]) -> DMatrix<f64> {
    let n = ybus.n();
    let v: Vec<Complex64> = vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
    let ibus = ybus.mul(&v);
    let mut col_a = vec![usize::MAX; n];
    let mut col_m = vec![usize::MAX; n];
    for (c, &i) in pvpq.iter().enumerate() {
        col_a[i] = c;
    }
    for (c, &i) in pq.iter().enumerate() {
        col_m[i] = pvpq.len() + c;
    }
    let dim = pvpq.len() + pq.len();
    let mut jac = DMatrix::zeros(dim, dim);
    let j = Complex64::i();
    let mut fill = |row_re: Option<usize>, row_im: Option<usize>, i: usize| {
        let vi = v[i];
        let unit_i = if vm[i] != 0.0 { vi / vm[i] } else { Complex64::from_polar(1.0, va[i]) };
        for &(k, y) in ybus.row(i) {
            let vk = v[k];
            let unit_k = if vm[k] != 0.0 { vk / vm[k] } else { Complex64::from_polar(1.0, va[k]) };
            // dS_i/dva_k and dS_i/dvm_k
            let mut ds_da = j * vi * (-(y * vk)).conj();
            let mut ds_dm = vi * (y * unit_k).conj();
            if k == i {
                ds_da += j * vi * ibus[i].conj();
                ds_dm += ibus[i].conj() * unit_i;
            }
            if let Some(r) = row_re {
                if col_a[k] != usize::MAX {
                    jac[(r, col_a[k])] = ds_da.re;
                }
                if col_m[k] != usize::MAX {
                    jac[(r, col_m[k])] = ds_dm.re;
                }
            }
            if let Some(r) = row_im {
                if col_a[k] != usize::MAX {
                    jac[(r, col_a[k])] = ds_da.im;
                }
                if col_m[k] != usize::MAX {
                    jac[(r, col_m[k])] = ds_dm.im;
                }
            }
        }
    };
    for &i in pvpq {
        let row_im = (col_m[i] != usize::MAX).then_some(col_m[i]);
        fill(Some(col_a[i]), row_im, i);
    }
    jac
}

fn newton(
    ybus: &Ybus,
    va: &mut [f64],
    vm: &mut [f64],
    sbus: &[Complex64],
    pvpq: &[usize],
    pq: &[usize],
    opts: &PfOptions,
) -> Newton {
    let mut f = mismatch(ybus, va, vm, sbus, pvpq, pq);
    let mut norm = max_abs(&f);
    let mut iterations = 0;
    loop {
        if !norm.is_finite() {
            return Newton {
                converged: false,
                iterations,
                mismatch: norm,
                message: Some("non-finite mismatch".into()),
            };
        }
        if norm <= opts.tol {
            return Newton {
                converged: true,
                iterations,
                mismatch: norm,
                message: None,
            };
        }
        if iterations >= opts.max_iter {
            return Newton {
                converged: false,
                iterations,
                mismatch: norm,
                message: Some(format!("no convergence after {iterations} iterations")),
            };
        }
        let jac = jacobian(ybus, va, vm, pvpq, pq);
        let rhs = DVector::from_vec(f.clone());
        let dx = match jac.lu().solve(&rhs) {
            Some(dx) if dx.iter().all(|x| x.is_finite()) => dx,
            _ => {
                return Newton {
                    converged: false,
                    iterations,
                    mismatch: norm,
                    message: Some("singular Jacobian".into()),
                }
            }
        };
        for (c, &i) in pvpq.iter().enumerate() {
            va[i] -= dx[c];
        }
        for (c, &i) in pq.iter().enumerate() {
            vm[i] -= dx[pvpq.len() + c];
        }
        iterations += 1;
        f = mismatch(ybus, va, vm, sbus, pvpq, pq);
        norm = max_abs(&f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Slack,
    Pv,
    Pq,
    Off,
}

/// Solve the AC power flow equations.
///
/// `init` supplies the starting angles and magnitudes, the fixed real power
/// of every non-slack generator and the voltage set points of PV and slack
/// buses. Without it the solve uses a flat start with set points from the
/// generators' `vg` and real power from their `pg`.
///
/// Failure to converge is reported through [`PfResult::converged`]; errors
/// are returned only for malformed input.
pub fn solve_pf(grid: &Grid, init: Option<&OpfSolution>, opts: &PfOptions) -> Result<PfResult> {
    let topo = grid.topology()?;
    if topo.ref_buses.is_empty() {
        return Err(Error::NoReferenceBus);
    }
    if let Some(s) = init {
        s.check_shape(grid)?;
    }
    let n = topo.n_bus;
    let gens_at = topo.gens_at_bus();
    let mut role: Vec<Role> = (0..n)
        .map(|i| match grid.buses[i].bus_type {
            BusType::Inactive => Role::Off,
            BusType::Ref => Role::Slack,
            _ if !gens_at[i].is_empty() => Role::Pv,
            _ => Role::Pq,
        })
        .collect();

    let (mut va, mut vm, pg_fixed) = match init {
        Some(s) => (s.va.clone(), s.vm.clone(), s.pg.clone()),
        None => {
            let vm = (0..n)
                .map(|i| match role[i] {
                    Role::Pv | Role::Slack => grid.generators[gens_at[i][0]].vg,
                    _ => 1.0,
                })
                .map(|v| if v > 0.0 { v } else { 1.0 })
                .collect();
            let pg = grid.generators.iter().map(|g| g.pg).collect();
            (vec![0.0; n], vm, pg)
        }
    };
    let mut qg: Vec<f64> = match init {
        Some(s) => s.qg.clone(),
        None => grid.generators.iter().map(|g| g.qg).collect(),
    };

    let ybus = build_ybus(grid)?;
    let mut demand = vec![Complex64::default(); n];
    for (l, &b) in grid.loads.iter().zip(&topo.load_bus) {
        demand[b] += Complex64::new(l.pd, l.qd);
    }

    let mut limited = vec![false; n];
    let mut result = PfResult {
        converged: false,
        iterations: 0,
        max_inner_iterations: 0,
        outer_iterations: 0,
        mismatch: f64::NAN,
        solution: OpfSolution::zeros(grid),
        limited_buses: Vec::new(),
        message: None,
    };

    loop {
        let pvpq: Vec<usize> = (0..n).filter(|&i| matches!(role[i], Role::Pv | Role::Pq)).collect();
        let pq: Vec<usize> = (0..n).filter(|&i| role[i] == Role::Pq).collect();
        let sbus: Vec<Complex64> = (0..n)
            .map(|i| {
                let p: f64 = gens_at[i].iter().map(|&g| pg_fixed[g]).sum();
                let q: f64 = if limited[i] {
                    gens_at[i].iter().map(|&g| qg[g]).sum()
                } else {
                    0.0
                };
                Complex64::new(p, q) - demand[i]
            })
            .collect();

        let outcome = newton(&ybus, &mut va, &mut vm, &sbus, &pvpq, &pq, opts);
        result.iterations += outcome.iterations;
        result.max_inner_iterations = result.max_inner_iterations.max(outcome.iterations);
        result.mismatch = outcome.mismatch;
        result.message = outcome.message;
        if !outcome.converged {
            break;
        }

        let s = bus_injections(&ybus, &va, &vm);
        let mut violated = Vec::new();
        if opts.enforce_q_lims {
            for i in (0..n).filter(|&i| role[i] == Role::Pv) {
                let q_total = s[i].im + demand[i].im;
                let qmin: f64 = gens_at[i].iter().map(|&g| grid.generators[g].qmin).sum();
                let qmax: f64 = gens_at[i].iter().map(|&g| grid.generators[g].qmax).sum();
                if q_total > qmax {
                    violated.push((i, true));
                } else if q_total < qmin {
                    violated.push((i, false));
                }
            }
        }
        if violated.is_empty() {
            result.converged = true;
            break;
        }
        if result.outer_iterations >= opts.max_outer {
            result.message = Some(format!(
                "reactive limits still violated after {} outer iterations",
                result.outer_iterations
            ));
            break;
        }
        for (i, upper) in violated {
            for &g in &gens_at[i] {
                let gen = &grid.generators[g];
                qg[g] = if upper { gen.qmax } else { gen.qmin };
            }
            role[i] = Role::Pq;
            limited[i] = true;
            result.limited_buses.push(grid.buses[i].id);
        }
        result.outer_iterations += 1;
    }

    let s = bus_injections(&ybus, &va, &vm);
    let mut pg = pg_fixed;
    for i in 0..n {
        let units = &gens_at[i];
        if units.is_empty() || limited[i] {
            continue;
        }
        let gens: Vec<_> = units.iter().map(|&g| &grid.generators[g]).collect();
        let qmin: Vec<f64> = gens.iter().map(|g| g.qmin).collect();
        let qmax: Vec<f64> = gens.iter().map(|g| g.qmax).collect();
        match role[i] {
            Role::Pv => {
                let share = proportional_share(s[i].im + demand[i].im, &qmin, &qmax);
                for ((&g, q), gen) in units.iter().zip(share).zip(&gens) {
                    qg[g] = q.clamp(gen.qmin, gen.qmax);
                }
            }
            Role::Slack => {
                let pmin: Vec<f64> = gens.iter().map(|g| g.pmin).collect();
                let pmax: Vec<f64> = gens.iter().map(|g| g.pmax).collect();
                let p_share = proportional_share(s[i].re + demand[i].re, &pmin, &pmax);
                let q_share = proportional_share(s[i].im + demand[i].im, &qmin, &qmax);
                for ((&g, p), q) in units.iter().zip(p_share).zip(q_share) {
                    pg[g] = p;
                    qg[g] = q;
                }
            }
            Role::Pq | Role::Off => {}
        }
    }
    let flows = derive_branch_flows(grid, &va, &vm)?;
    result.solution = OpfSolution {
        va,
        vm,
        pg,
        qg,
        pf: flows.pf,
        qf: flows.qf,
        pt: flows.pt,
        qt: flows.qt,
    };
    Ok(result)
}

/// Power flow warm-started from an approximate solution, with reactive
/// limits enforced.
pub fn restore(grid: &Grid, approx: &OpfSolution) -> Result<PfResult> {
    solve_pf(grid, Some(approx), &PfOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_case;
    use crate::cases;
    use crate::grid::{Branch, BranchKind, Bus, Generator, Load, Shunt};

    fn bus(id: usize, t: BusType) -> Bus {
        Bus { id, base_kv: 100.0, bus_type: t, vmin: 0.9, vmax: 1.1 }
    }

    fn line(id: usize, from: usize, to: usize, r: f64, x: f64) -> Branch {
        Branch {
            id,
            from_bus: from,
            to_bus: to,
            kind: BranchKind::AcLine,
            br_r: r,
            br_x: x,
            b_fr: 0.0,
            b_to: 0.0,
            rate_a: 0.0,
            rate_b: 0.0,
            rate_c: 0.0,
            angmin: -1.0,
            angmax: 1.0,
            tap: 1.0,
            shift: 0.0,
        }
    }

    fn slack_gen(bus: usize) -> Generator {
        Generator {
            id: 1,
            bus,
            mbase: 100.0,
            pg: 0.0,
            pmin: 0.0,
            pmax: 10.0,
            qg: 0.0,
            qmin: -10.0,
            qmax: 10.0,
            vg: 1.0,
            cost_squared: 0.0,
            cost_linear: 1.0,
            cost_offset: 0.0,
        }
    }

    fn two_bus(pd: f64) -> Grid {
        Grid {
            base_mva: 100.0,
            buses: vec![bus(1, BusType::Ref), bus(2, BusType::Pq)],
            generators: vec![slack_gen(1)],
            loads: vec![Load { id: 1, bus: 2, pd, qd: 0.0 }],
            shunts: vec![],
            branches: vec![line(1, 1, 2, 0.0, 0.1)],
        }
    }

    #[test]
    fn ybus_single_branch() {
        let mut g = two_bus(0.0);
        let y = build_ybus(&g).unwrap().to_dense();
        let j = Complex64::i();
        let close = |a: Complex64, b: Complex64| (a - b).norm() < 1e-12;
        assert!(close(y[0][0], -10.0 * j));
        assert!(close(y[0][1], 10.0 * j));
        assert!(close(y[1][0], 10.0 * j));
        assert!(close(y[1][1], -10.0 * j));
        g.shunts.push(Shunt { id: 1, bus: 1, gs: 0.0, bs: 0.05 });
        let y2 = build_ybus(&g).unwrap();
        assert!(close(y2.get(0, 0), y[0][0] + 0.05 * j));
    }

    #[test]
    fn two_bus_lossless_closed_form() {
        let r = solve_pf(&two_bus(0.5), None, &PfOptions::default()).unwrap();
        assert!(r.converged, "{:?}", r.message);
        let theta = 0.1f64.asin() / 2.0;
        assert!((r.solution.vm[1] - theta.cos()).abs() < 1e-6);
        assert!((r.solution.va[1] + theta).abs() < 1e-6);
        assert!((r.solution.pg[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn zero_load_flat_start() {
        let r = solve_pf(&two_bus(0.0), None, &PfOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2);
        assert_eq!(r.solution.vm, vec![1.0, 1.0]);
        assert_eq!(r.solution.va, vec![0.0, 0.0]);
        assert_eq!(r.solution.pg[0], 0.0);
    }

    #[test]
    fn case14_converges_and_holds_non_slack_power() {
        let grid = parse_case(cases::CASE14).unwrap();
        let r = solve_pf(&grid, None, &PfOptions::default()).unwrap();
        assert!(r.converged, "{:?}", r.message);
        assert!(r.max_inner_iterations <= 10);
        for (k, g) in grid.generators.iter().enumerate() {
            if grid.buses.iter().find(|b| b.id == g.bus).unwrap().bus_type != BusType::Ref {
                assert_eq!(r.solution.pg[k].to_bits(), g.pg.to_bits());
                assert!(r.solution.qg[k] >= g.qmin && r.solution.qg[k] <= g.qmax);
            }
        }
    }

    #[test]
    fn reactive_limit_clamps_and_converts() {
        let mut grid = parse_case(cases::CASE14).unwrap();
        for g in &mut grid.generators {
            g.qmin = -10.0;
            g.qmax = 10.0;
        }
        let wide = solve_pf(&grid, None, &PfOptions::default()).unwrap();
        assert!(wide.converged && wide.limited_buses.is_empty());
        let k = grid.generators.iter().position(|g| g.bus == 2).unwrap();
        let natural = wide.solution.qg[k];
        grid.generators[k].qmax = natural - 0.1;
        let r = solve_pf(&grid, None, &PfOptions::default()).unwrap();
        assert!(r.converged, "{:?}", r.message);
        assert!(r.limited_buses.contains(&2));
        assert_eq!(r.solution.qg[k], grid.generators[k].qmax);
        assert!(r.outer_iterations >= 1);
    }

    #[test]
    fn restore_is_a_fixed_point() {
        let grid = parse_case(cases::CASE14).unwrap();
        let first = solve_pf(&grid, None, &PfOptions::default()).unwrap();
        let again = restore(&grid, &first.solution).unwrap();
        assert!(again.converged);
        let a = &first.solution;
        let b = &again.solution;
        for (x, y) in [(&a.va, &b.va), (&a.vm, &b.vm), (&a.pg, &b.pg), (&a.qg, &b.qg), (&a.pf, &b.pf), (&a.qt, &b.qt)] {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn isolated_pq_bus_reports_singular_jacobian() {
        let mut g = two_bus(0.5);
        g.buses.push(bus(3, BusType::Pq));
        g.loads.push(Load { id: 2, bus: 3, pd: 0.1, qd: 0.0 });
        let r = solve_pf(&g, None, &PfOptions::default()).unwrap();
        assert!(!r.converged);
        assert!(r.message.is_some());
    }

    #[test]
    fn proportional_share_splits_by_range() {
        assert_eq!(proportional_share(3.0, &[0.0, 0.0], &[1.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(proportional_share(1.0, &[0.5, 0.5], &[0.5, 0.5]), vec![0.5, 0.5]);
        assert!(proportional_share(1.0, &[], &[]).is_empty());
    }
}
