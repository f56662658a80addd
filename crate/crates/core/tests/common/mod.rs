#![allow(dead_code)]

use gridopf::acpf::restore;
use gridopf::constraints::{objective_cost, violation_degrees};
use gridopf::grid::{Grid, OpfSolution};

/// Largest degree over every audited family.
pub fn max_violation(grid: &Grid, s: &OpfSolution) -> f64 {
    violation_degrees(grid, s)
        .unwrap()
        .iter()
        .filter_map(|(_, d)| d.max())
        .fold(0.0, f64::max)
}

pub struct Probe {
    /// Cost of the solution after a power flow at its own set points.
    pub base_cost: f64,
    /// Lowest `probe cost - base cost` among feasible probes.
    pub best_delta: Option<f64>,
    pub feasible_probes: usize,
}

/// Move each non-slack `pg` by `+-delta`, rerun the power flow, and record
/// the cost change of probes whose every violation degree stays below `tol`.
pub fn pg_probe(grid: &Grid, s: &OpfSolution, delta: f64, tol: f64) -> Probe {
    let topo = grid.topology().unwrap();
    let base = restore(grid, s).unwrap();
    assert!(base.converged);
    let base_cost = objective_cost(grid, &base.solution);
    let mut best: Option<f64> = None;
    let mut feasible = 0;
    for k in 0..grid.generators.len() {
        if topo.ref_buses.contains(&topo.gen_bus[k]) {
            continue;
        }
        for d in [delta, -delta] {
            let mut p = s.clone();
            p.pg[k] += d;
            let pf = restore(grid, &p).unwrap();
            if pf.converged && max_violation(grid, &pf.solution) <= tol {
                feasible += 1;
                let dc = objective_cost(grid, &pf.solution) - base_cost;
                best = Some(best.map_or(dc, |b: f64| b.min(dc)));
            }
        }
    }
    Probe {
        base_cost,
        best_delta: best,
        feasible_probes: feasible,
    }
}
