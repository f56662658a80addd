//! Objective, branch-flow derivation and constraint violation degrees.
//!
//! Every constraint of the AC-OPF problem is measured by a nonnegative
//! *degree*: `|lhs - rhs|` for equalities (complex equalities split into real
//! and reactive parts) and the distance past the nearest bound for
//! inequalities.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{branch_pi_params, Grid, OpfSolution};

/// Generation cost `sum_k c2_k pg_k^2 + c1_k pg_k`. The constant term is not
/// part of the objective.
pub fn objective_cost(grid: &Grid, solution: &OpfSolution) -> f64 {
    grid.generators
        .iter()
        .zip(&solution.pg)
        .map(|(g, &p)| g.cost_squared * p * p + g.cost_linear * p)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlows {
    pub pf: Vec<f64>,
    pub qf: Vec<f64>,
    pub pt: Vec<f64>,
    pub qt: Vec<f64>,
}

/// Complex power withdrawn at both ends of every branch, given bus voltage
/// angles `va` and magnitudes `vm` in grid bus order.
///
/// The from side uses `(Y + Yc_fr)^* |Vi|^2 / |T|^2 - Y^* Vi Vj^* / T`; the to
/// side is the matching Π-model expression `(Y + Yc_to)^* |Vj|^2 - Y^* Vj Vi^* / T^*`.
pub fn derive_branch_flows(grid: &Grid, va: &[f64], vm: &[f64]) -> Result<BranchFlows> {
    let topo = grid.topology()?;
    let n = grid.branches.len();
    let mut out = BranchFlows {
        pf: Vec::with_capacity(n),
        qf: Vec::with_capacity(n),
        pt: Vec::with_capacity(n),
        qt: Vec::with_capacity(n),
    };
    for (k, br) in grid.branches.iter().enumerate() {
        let pi = branch_pi_params(br)?;
        let (i, j) = (topo.branch_from[k], topo.branch_to[k]);
        let vi = Complex64::from_polar(vm[i], va[i]);
        let vj = Complex64::from_polar(vm[j], va[j]);
        let s_ij = (pi.y + pi.yc_fr).conj() * vi.norm_sqr() / pi.t.norm_sqr()
            - pi.y.conj() * vi * vj.conj() / pi.t;
        let s_ji = (pi.y + pi.yc_to).conj() * vj.norm_sqr() - pi.y.conj() * vj * vi.conj() / pi.t.conj();
        out.pf.push(s_ij.re);
        out.qf.push(s_ij.im);
        out.pt.push(s_ji.re);
        out.qt.push(s_ji.im);
    }
    Ok(out)
}

/// Constraint families audited by [`violation_degrees`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    RefAngle,
    PgBounds,
    QgBounds,
    VmBounds,
    PBalance,
    QBalance,
    OhmFromP,
    OhmFromQ,
    OhmToP,
    OhmToQ,
    ThermalFrom,
    ThermalTo,
    AngleDiff,
}

impl Family {
    pub const ALL: [Family; 13] = [
        Family::RefAngle,
        Family::PgBounds,
        Family::QgBounds,
        Family::VmBounds,
        Family::PBalance,
        Family::QBalance,
        Family::OhmFromP,
        Family::OhmFromQ,
        Family::OhmToP,
        Family::OhmToQ,
        Family::ThermalFrom,
        Family::ThermalTo,
        Family::AngleDiff,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::RefAngle => "Reference bus voltage angle",
            Family::PgBounds => "Generator real power bounds",
            Family::QgBounds => "Generator reactive power bounds",
            Family::VmBounds => "Bus voltage bounds",
            Family::PBalance => "Real power balance bus",
            Family::QBalance => "Reactive power balance bus",
            Family::OhmFromP => "Ohm real power from",
            Family::OhmFromQ => "Ohm reactive power from",
            Family::OhmToP => "Ohm real power to",
            Family::OhmToQ => "Ohm reactive power to",
            Family::ThermalFrom => "Branch thermal limit from",
            Family::ThermalTo => "Branch thermal limit to",
            Family::AngleDiff => "Branch voltage angle difference",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Degrees of one family, with the grid position of the entity each degree
/// belongs to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyDegrees {
    pub entities: Vec<usize>,
    pub degrees: Vec<f64>,
}

impl FamilyDegrees {
    fn push(&mut self, entity: usize, degree: f64) {
        self.entities.push(entity);
        self.degrees.push(degree);
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.degrees.iter().sum::<f64>() / self.len() as f64)
    }

    pub fn max(&self) -> Option<f64> {
        self.degrees.iter().copied().reduce(f64::max)
    }

    /// Keep only entities accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(usize) -> bool) -> FamilyDegrees {
        let mut out = FamilyDegrees::default();
        for (&e, &d) in self.entities.iter().zip(&self.degrees) {
            if keep(e) {
                out.push(e, d);
            }
        }
        out
    }

    /// Percentage of entities whose degree is strictly below `tau`; `None`
    /// for an empty family.
    pub fn fraction_below(&self, tau: f64) -> Option<f64> {
        (!self.is_empty()).then(|| {
            100.0 * self.degrees.iter().filter(|&&d| d < tau).count() as f64 / self.len() as f64
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub ref_angle: FamilyDegrees,
    pub pg_bounds: FamilyDegrees,
    pub qg_bounds: FamilyDegrees,
    pub vm_bounds: FamilyDegrees,
    pub p_balance: FamilyDegrees,
    pub q_balance: FamilyDegrees,
    pub ohm_from_p: FamilyDegrees,
    pub ohm_from_q: FamilyDegrees,
    pub ohm_to_p: FamilyDegrees,
    pub ohm_to_q: FamilyDegrees,
    pub thermal_from: FamilyDegrees,
    pub thermal_to: FamilyDegrees,
    pub angle_diff: FamilyDegrees,
}

impl ViolationReport {
    pub fn family(&self, family: Family) -> &FamilyDegrees {
        match family {
            Family::RefAngle => &self.ref_angle,
            Family::PgBounds => &self.pg_bounds,
            Family::QgBounds => &self.qg_bounds,
            Family::VmBounds => &self.vm_bounds,
            Family::PBalance => &self.p_balance,
            Family::QBalance => &self.q_balance,
            Family::OhmFromP => &self.ohm_from_p,
            Family::OhmFromQ => &self.ohm_from_q,
            Family::OhmToP => &self.ohm_to_p,
            Family::OhmToQ => &self.ohm_to_q,
            Family::ThermalFrom => &self.thermal_from,
            Family::ThermalTo => &self.thermal_to,
            Family::AngleDiff => &self.angle_diff,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Family, &FamilyDegrees)> {
        Family::ALL.into_iter().map(move |f| (f, self.family(f)))
    }

    pub fn mean(&self, family: Family) -> Option<f64> {
        self.family(family).mean()
    }

    pub fn max(&self, family: Family) -> Option<f64> {
        self.family(family).max()
    }

    /// Largest of the p/q balance maxima.
    pub fn max_balance(&self) -> f64 {
        self.p_balance
            .max()
            .unwrap_or(0.0)
            .max(self.q_balance.max().unwrap_or(0.0))
    }
}

/// Per-family percentage of entities with degree below `tau`. Empty families
/// map to `None` (not applicable).
pub fn feasibility_at_threshold(report: &ViolationReport, tau: f64) -> Vec<(Family, Option<f64>)> {
    report
        .iter()
        .map(|(f, d)| (f, d.fraction_below(tau)))
        .collect()
}

#[inline]
fn bound_excess(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(x - hi).max(0.0)
}

/// Audit every constraint family for `solution` on `grid`.
///
/// Entities attached to inactive buses are skipped. Balance degrees use the
/// branch flows stored in `solution`, so they reflect the solution as given
/// rather than the flows its voltages imply.
pub fn violation_degrees(grid: &Grid, solution: &OpfSolution) -> Result<ViolationReport> {
    solution.check_shape(grid)?;
    let topo = grid.topology()?;
    let derived = derive_branch_flows(grid, &solution.va, &solution.vm)?;
    let mut r = ViolationReport::default();

    for &i in &topo.ref_buses {
        r.ref_angle.push(i, solution.va[i].abs());
    }
    for (k, g) in grid.generators.iter().enumerate() {
        if !topo.bus_active[topo.gen_bus[k]] {
            continue;
        }
        r.pg_bounds.push(k, bound_excess(solution.pg[k], g.pmin, g.pmax));
        r.qg_bounds.push(k, bound_excess(solution.qg[k], g.qmin, g.qmax));
    }

    let n = grid.buses.len();
    let mut p_net = vec![0.0; n];
    let mut q_net = vec![0.0; n];
    for (k, &b) in topo.gen_bus.iter().enumerate() {
        p_net[b] += solution.pg[k];
        q_net[b] += solution.qg[k];
    }
    for (l, &b) in grid.loads.iter().zip(&topo.load_bus) {
        p_net[b] -= l.pd;
        q_net[b] -= l.qd;
    }
    for (s, &b) in grid.shunts.iter().zip(&topo.shunt_bus) {
        let v2 = solution.vm[b] * solution.vm[b];
        p_net[b] -= s.gs * v2;
        q_net[b] += s.bs * v2;
    }
    for k in 0..grid.branches.len() {
        if !topo.branch_active(k) {
            continue;
        }
        let (i, j) = (topo.branch_from[k], topo.branch_to[k]);
        p_net[i] -= solution.pf[k];
        q_net[i] -= solution.qf[k];
        p_net[j] -= solution.pt[k];
        q_net[j] -= solution.qt[k];
    }
    for (i, bus) in grid.buses.iter().enumerate() {
        if !topo.bus_active[i] {
            continue;
        }
        r.vm_bounds.push(i, bound_excess(solution.vm[i], bus.vmin, bus.vmax));
        r.p_balance.push(i, p_net[i].abs());
        r.q_balance.push(i, q_net[i].abs());
    }

    for (k, br) in grid.branches.iter().enumerate() {
        if !topo.branch_active(k) {
            continue;
        }
        r.ohm_from_p.push(k, (solution.pf[k] - derived.pf[k]).abs());
        r.ohm_from_q.push(k, (solution.qf[k] - derived.qf[k]).abs());
        r.ohm_to_p.push(k, (solution.pt[k] - derived.pt[k]).abs());
        r.ohm_to_q.push(k, (solution.qt[k] - derived.qt[k]).abs());
        if let Some(limit) = br.thermal_limit() {
            r.thermal_from
                .push(k, (solution.pf[k].hypot(solution.qf[k]) - limit).max(0.0));
            r.thermal_to
                .push(k, (solution.pt[k].hypot(solution.qt[k]) - limit).max(0.0));
        }
        let diff = solution.va[topo.branch_from[k]] - solution.va[topo.branch_to[k]];
        r.angle_diff.push(k, bound_excess(diff, br.angmin, br.angmax));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, BranchKind, Bus, BusType, Generator, Load};
    use approx::assert_abs_diff_eq;

    fn two_bus(r: f64, x: f64) -> Grid {
        Grid {
            base_mva: 100.0,
            buses: vec![
                Bus { id: 1, base_kv: 230.0, bus_type: BusType::Ref, vmin: 0.9, vmax: 1.1 },
                Bus { id: 2, base_kv: 230.0, bus_type: BusType::Pq, vmin: 0.9, vmax: 1.1 },
            ],
            generators: vec![],
            loads: vec![],
            shunts: vec![],
            branches: vec![Branch {
                id: 1,
                from_bus: 1,
                to_bus: 2,
                kind: BranchKind::AcLine,
                br_r: r,
                br_x: x,
                b_fr: 0.0,
                b_to: 0.0,
                rate_a: 0.0,
                rate_b: 0.0,
                rate_c: 0.0,
                angmin: -0.5,
                angmax: 0.5,
                tap: 1.0,
                shift: 0.0,
            }],
        }
    }

    fn gen(id: usize, bus: usize, c2: f64, c1: f64) -> Generator {
        Generator {
            id,
            bus,
            mbase: 100.0,
            pg: 0.0,
            pmin: 0.0,
            pmax: 1.0,
            qg: 0.0,
            qmin: -1.0,
            qmax: 1.0,
            vg: 1.0,
            cost_squared: c2,
            cost_linear: c1,
            cost_offset: 0.0,
        }
    }

    #[test]
    fn linear_cost_in_per_unit() {
        let mut g = two_bus(0.0, 0.1);
        // 40 $/MWh rescaled for per-unit power at baseMVA = 100.
        g.generators.push(gen(1, 1, 0.0, 40.0 * 100.0));
        let mut s = OpfSolution::zeros(&g);
        s.pg[0] = 0.5;
        assert_abs_diff_eq!(objective_cost(&g, &s), 2000.0, epsilon = 1e-9);
        s.pg[0] = 0.0;
        assert_eq!(objective_cost(&g, &s), 0.0);
    }

    #[test]
    fn quadratic_cost_matches_mixed_units() {
        let mut g = two_bus(0.0, 0.1);
        g.generators.push(gen(1, 1, 0.01 * 100.0 * 100.0, 0.0));
        g.generators.push(gen(2, 2, 0.01 * 100.0 * 100.0, 0.0));
        let mut s = OpfSolution::zeros(&g);
        s.pg = vec![1.0, 1.0];
        // Mixed-units: two units at 100 MW each, 0.01 $/MW^2h.
        let mixed: f64 = [100.0f64, 100.0].iter().map(|mw| 0.01 * mw * mw).sum();
        assert_abs_diff_eq!(objective_cost(&g, &s), mixed, epsilon = 1e-9);
        assert_abs_diff_eq!(mixed, 200.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_voltages_carry_no_flow() {
        let g = two_bus(0.0, 0.1);
        let f = derive_branch_flows(&g, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        for v in [f.pf[0], f.qf[0], f.pt[0], f.qt[0]] {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn angle_difference_flow_matches_complex_oracle() {
        let g = two_bus(0.0, 0.1);
        let f = derive_branch_flows(&g, &[0.0, -0.1], &[1.0, 1.0]).unwrap();
        // 10j * (1 - e^{j 0.1})
        let want = Complex64::new(0.0, 10.0) * (Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, 0.1));
        assert_abs_diff_eq!(f.pf[0], want.re, epsilon = 1e-12);
        assert_abs_diff_eq!(f.qf[0], want.im, epsilon = 1e-12);
        assert_abs_diff_eq!(f.pf[0], 0.99833, epsilon = 1e-5);
        assert_abs_diff_eq!(f.qf[0], 0.04996, epsilon = 1e-5);
    }

    #[test]
    fn isolated_load_imbalance_equals_demand() {
        let mut g = two_bus(0.0, 0.1);
        g.loads.push(Load { id: 1, bus: 2, pd: 1.0, qd: 0.0 });
        g.branches.clear();
        let s = OpfSolution {
            va: vec![0.0, 0.0],
            vm: vec![1.0, 1.0],
            ..OpfSolution::zeros(&g)
        };
        let r = violation_degrees(&g, &s).unwrap();
        assert_abs_diff_eq!(r.p_balance.degrees[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn generator_bound_excess() {
        let mut g = two_bus(0.0, 0.1);
        g.generators.push(gen(1, 1, 0.0, 1.0));
        let mut s = OpfSolution::zeros(&g);
        s.vm = vec![1.0, 1.0];
        s.pg[0] = 1.2;
        let r = violation_degrees(&g, &s).unwrap();
        assert_abs_diff_eq!(r.pg_bounds.degrees[0], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn derived_flows_are_ohm_consistent() {
        let mut g = two_bus(0.02, 0.1);
        g.branches[0].b_fr = 0.03;
        g.branches[0].b_to = 0.02;
        g.branches[0].tap = 1.04;
        g.branches[0].shift = 0.05;
        let s = OpfSolution {
            va: vec![0.0, -0.13],
            vm: vec![1.02, 0.97],
            ..OpfSolution::zeros(&g)
        }
        .with_derived_flows(&g)
        .unwrap();
        let r = violation_degrees(&g, &s).unwrap();
        for fam in [Family::OhmFromP, Family::OhmFromQ, Family::OhmToP, Family::OhmToQ] {
            assert!(r.max(fam).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn feasibility_percentages() {
        let d = FamilyDegrees { entities: vec![0, 1, 2], degrees: vec![0.0, 0.005, 0.02] };
        assert_abs_diff_eq!(d.fraction_below(0.01).unwrap(), 200.0 / 3.0, epsilon = 1e-12);
        let zeros = FamilyDegrees { entities: vec![0, 1], degrees: vec![0.0, 0.0] };
        assert_eq!(zeros.fraction_below(1e-8), Some(100.0));
        assert_eq!(FamilyDegrees::default().fraction_below(0.1), None);
    }

    #[test]
    fn thermal_degree_only_on_rated_branches() {
        let mut g = two_bus(0.0, 0.1);
        let s = OpfSolution {
            va: vec![0.0, -0.1],
            vm: vec![1.0, 1.0],
            ..OpfSolution::zeros(&g)
        }
        .with_derived_flows(&g)
        .unwrap();
        assert!(violation_degrees(&g, &s).unwrap().thermal_from.is_empty());
        g.branches[0].rate_a = 0.5;
        let r = violation_degrees(&g, &s).unwrap();
        let want = s.pf[0].hypot(s.qf[0]) - 0.5;
        assert_abs_diff_eq!(r.thermal_from.degrees[0], want, epsilon = 1e-15);
    }
}
