//! Per-unit grid model.
//!
//! A [`Grid`] holds buses, generators, loads, shunts and branches exactly as
//! they appear in the dataset records. Elements reference buses by their
//! external `id`; [`Topology`] resolves those references to positions once so
//! numerical kernels can work with plain indices.

use std::collections::{HashMap, VecDeque};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusType {
    #[serde(rename = "PQ")]
    Pq,
    #[serde(rename = "PV")]
    Pv,
    #[serde(rename = "REF")]
    Ref,
    #[serde(rename = "INACTIVE")]
    Inactive,
}

impl BusType {
    /// Position in the one-hot encoding used for node features.
    pub fn one_hot_index(self) -> usize {
        match self {
            BusType::Pq => 0,
            BusType::Pv => 1,
            BusType::Ref => 2,
            BusType::Inactive => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub base_kv: f64,
    pub bus_type: BusType,
    pub vmin: f64,
    pub vmax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: usize,
    pub bus: usize,
    pub mbase: f64,
    pub pg: f64,
    pub pmin: f64,
    pub pmax: f64,
    pub qg: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub vg: f64,
    /// Coefficient of `pg^2`, already rescaled for per-unit `pg`.
    pub cost_squared: f64,
    /// Coefficient of `pg`, already rescaled for per-unit `pg`.
    pub cost_linear: f64,
    pub cost_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub id: usize,
    pub bus: usize,
    pub pd: f64,
    pub qd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shunt {
    pub id: usize,
    pub bus: usize,
    pub gs: f64,
    pub bs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    #[serde(rename = "AC_LINE")]
    AcLine,
    #[serde(rename = "TRANSFORMER")]
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub kind: BranchKind,
    pub br_r: f64,
    pub br_x: f64,
    pub b_fr: f64,
    pub b_to: f64,
    /// Long-term apparent power rating. A rating of zero means unlimited.
    pub rate_a: f64,
    pub rate_b: f64,
    pub rate_c: f64,
    pub angmin: f64,
    pub angmax: f64,
    pub tap: f64,
    pub shift: f64,
}

impl Branch {
    /// The apparent power limit, or `None` for an unrated branch.
    pub fn thermal_limit(&self) -> Option<f64> {
        (self.rate_a > 0.0).then_some(self.rate_a)
    }
}

/// Π-section parameters of a branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiParams {
    /// Series admittance.
    pub y: Complex64,
    pub yc_fr: Complex64,
    pub yc_to: Complex64,
    /// Complex transformation ratio `tap * e^{j shift}`.
    pub t: Complex64,
}

/// Series admittance, charging admittances and complex ratio of `branch`.
pub fn branch_pi_params(branch: &Branch) -> Result<PiParams> {
    let z = Complex64::new(branch.br_r, branch.br_x);
    if z.norm_sqr() == 0.0 {
        return Err(Error::DegenerateBranch(branch.id));
    }
    Ok(PiParams {
        y: z.inv(),
        yc_fr: Complex64::new(0.0, branch.b_fr),
        yc_to: Complex64::new(0.0, branch.b_to),
        t: Complex64::from_polar(branch.tap, branch.shift),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(rename = "baseMVA")]
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub shunts: Vec<Shunt>,
    pub branches: Vec<Branch>,
}

/// Index-resolved view of a grid's cross references.
#[derive(Debug, Clone)]
pub struct Topology {
    pub n_bus: usize,
    pub gen_bus: Vec<usize>,
    pub load_bus: Vec<usize>,
    pub shunt_bus: Vec<usize>,
    pub branch_from: Vec<usize>,
    pub branch_to: Vec<usize>,
    pub bus_active: Vec<bool>,
    pub ref_buses: Vec<usize>,
}

impl Topology {
    pub fn branch_active(&self, k: usize) -> bool {
        self.bus_active[self.branch_from[k]] && self.bus_active[self.branch_to[k]]
    }

    /// Generator positions grouped by bus position.
    pub fn gens_at_bus(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_bus];
        for (g, &b) in self.gen_bus.iter().enumerate() {
            out[b].push(g);
        }
        out
    }
}

impl Grid {
    pub fn bus_positions(&self) -> HashMap<usize, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    pub fn topology(&self) -> Result<Topology> {
        let pos = self.bus_positions();
        if pos.len() != self.buses.len() {
            return Err(Error::InvalidGrid("duplicate bus id".into()));
        }
        let lookup = |bus: usize, context: &str| {
            pos.get(&bus).copied().ok_or_else(|| Error::UnknownBus {
                bus,
                context: context.to_string(),
            })
        };
        let gen_bus = self
            .generators
            .iter()
            .map(|g| lookup(g.bus, "generator"))
            .collect::<Result<Vec<_>>>()?;
        let load_bus = self
            .loads
            .iter()
            .map(|l| lookup(l.bus, "load"))
            .collect::<Result<Vec<_>>>()?;
        let shunt_bus = self
            .shunts
            .iter()
            .map(|s| lookup(s.bus, "shunt"))
            .collect::<Result<Vec<_>>>()?;
        let branch_from = self
            .branches
            .iter()
            .map(|b| lookup(b.from_bus, "branch"))
            .collect::<Result<Vec<_>>>()?;
        let branch_to = self
            .branches
            .iter()
            .map(|b| lookup(b.to_bus, "branch"))
            .collect::<Result<Vec<_>>>()?;
        let bus_active = self
            .buses
            .iter()
            .map(|b| b.bus_type != BusType::Inactive)
            .collect();
        let ref_buses = self
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.bus_type == BusType::Ref)
            .map(|(i, _)| i)
            .collect();
        Ok(Topology {
            n_bus: self.buses.len(),
            gen_bus,
            load_bus,
            shunt_bus,
            branch_from,
            branch_to,
            bus_active,
            ref_buses,
        })
    }

    pub fn has_inactive(&self) -> bool {
        self.buses.iter().any(|b| b.bus_type == BusType::Inactive)
    }

    /// Copy of the grid with inactive buses and every element attached to
    /// them removed.
    pub fn prune_inactive(&self) -> Grid {
        let active: std::collections::HashSet<usize> = self
            .buses
            .iter()
            .filter(|b| b.bus_type != BusType::Inactive)
            .map(|b| b.id)
            .collect();
        Grid {
            base_mva: self.base_mva,
            buses: self
                .buses
                .iter()
                .filter(|b| active.contains(&b.id))
                .cloned()
                .collect(),
            generators: self
                .generators
                .iter()
                .filter(|g| active.contains(&g.bus))
                .cloned()
                .collect(),
            loads: self
                .loads
                .iter()
                .filter(|l| active.contains(&l.bus))
                .cloned()
                .collect(),
            shunts: self
                .shunts
                .iter()
                .filter(|s| active.contains(&s.bus))
                .cloned()
                .collect(),
            branches: self
                .branches
                .iter()
                .filter(|b| active.contains(&b.from_bus) && active.contains(&b.to_bus))
                .cloned()
                .collect(),
        }
    }

    /// Check element invariants, cross references and connectivity.
    pub fn validate(&self) -> Result<()> {
        let topo = self.topology()?;
        if topo.ref_buses.is_empty() {
            return Err(Error::NoReferenceBus);
        }
        for b in &self.buses {
            if !(b.vmin > 0.0 && b.vmin <= b.vmax) {
                return Err(Error::InvalidGrid(format!("bus {}: bad voltage bounds", b.id)));
            }
        }
        for g in &self.generators {
            if g.pmin > g.pmax || g.qmin > g.qmax {
                return Err(Error::InvalidGrid(format!("generator {}: bad bounds", g.id)));
            }
        }
        for br in &self.branches {
            branch_pi_params(br)?;
            if br.tap <= 0.0 || br.angmin > br.angmax || br.rate_a < 0.0 {
                return Err(Error::InvalidGrid(format!("branch {}: bad parameters", br.id)));
            }
        }
        if !is_connected(self) {
            return Err(Error::InvalidGrid("grid is not connected".into()));
        }
        Ok(())
    }

    pub fn total_load(&self) -> (f64, f64) {
        self.loads
            .iter()
            .fold((0.0, 0.0), |(p, q), l| (p + l.pd, q + l.qd))
    }
}

/// Whether every active bus is reachable from the reference bus through
/// active branches. Dangling references count as disconnected.
pub fn is_connected(grid: &Grid) -> bool {
    let topo = match grid.topology() {
        Ok(t) => t,
        Err(_) => return false,
    };
    let start = match topo
        .ref_buses
        .first()
        .copied()
        .or_else(|| topo.bus_active.iter().position(|&a| a))
    {
        Some(s) => s,
        None => return true,
    };
    let mut adjacency = vec![Vec::new(); topo.n_bus];
    for k in 0..grid.branches.len() {
        if topo.branch_active(k) {
            adjacency[topo.branch_from[k]].push(topo.branch_to[k]);
            adjacency[topo.branch_to[k]].push(topo.branch_from[k]);
        }
    }
    let mut seen = vec![false; topo.n_bus];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    (0..topo.n_bus).all(|i| !topo.bus_active[i] || seen[i])
}

/// A complete dispatch: bus voltages, generator powers and branch flows in
/// both directions, all per unit (angles in radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub va: Vec<f64>,
    pub vm: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub pf: Vec<f64>,
    pub qf: Vec<f64>,
    pub pt: Vec<f64>,
    pub qt: Vec<f64>,
}

impl OpfSolution {
    /// All zeros with the grid's element counts.
    pub fn zeros(grid: &Grid) -> Self {
        let (n, g, e) = (grid.buses.len(), grid.generators.len(), grid.branches.len());
        OpfSolution {
            va: vec![0.0; n],
            vm: vec![0.0; n],
            pg: vec![0.0; g],
            qg: vec![0.0; g],
            pf: vec![0.0; e],
            qf: vec![0.0; e],
            pt: vec![0.0; e],
            qt: vec![0.0; e],
        }
    }

    pub fn check_shape(&self, grid: &Grid) -> Result<()> {
        let (n, g, e) = (grid.buses.len(), grid.generators.len(), grid.branches.len());
        let checks = [
            ("va", self.va.len(), n),
            ("vm", self.vm.len(), n),
            ("pg", self.pg.len(), g),
            ("qg", self.qg.len(), g),
            ("pf", self.pf.len(), e),
            ("qf", self.qf.len(), e),
            ("pt", self.pt.len(), e),
            ("qt", self.qt.len(), e),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has length {got}, expected {want}"
                )));
            }
        }
        Ok(())
    }

    /// Replace the branch flows with the ones implied by `va` and `vm`.
    pub fn with_derived_flows(mut self, grid: &Grid) -> Result<Self> {
        let flows = crate::constraints::derive_branch_flows(grid, &self.va, &self.vm)?;
        self.pf = flows.pf;
        self.qf = flows.qf;
        self.pt = flows.pt;
        self.qt = flows.qt;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn line(id: usize, from: usize, to: usize, r: f64, x: f64) -> Branch {
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

    fn bus(id: usize, bus_type: BusType) -> Bus {
        Bus {
            id,
            base_kv: 100.0,
            bus_type,
            vmin: 0.9,
            vmax: 1.1,
        }
    }

    fn grid(buses: Vec<Bus>, branches: Vec<Branch>) -> Grid {
        Grid {
            base_mva: 100.0,
            buses,
            generators: vec![],
            loads: vec![],
            shunts: vec![],
            branches,
        }
    }

    #[test]
    fn pure_reactance_admittance() {
        let p = branch_pi_params(&line(1, 1, 2, 0.0, 0.1)).unwrap();
        assert_abs_diff_eq!(p.y.re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y.im, -10.0, epsilon = 1e-12);
        assert_eq!(p.t, Complex64::new(1.0, 0.0));
        assert_eq!(p.yc_fr, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn transformer_ratio_is_polar() {
        let mut b = line(1, 1, 2, 0.01, 0.1);
        b.tap = 1.05;
        b.shift = 0.1;
        let p = branch_pi_params(&b).unwrap();
        let want_y = Complex64::new(1.0, 0.0) / Complex64::new(0.01, 0.1);
        assert_abs_diff_eq!((p.y - want_y).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.t.re, 1.05 * 0.1f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.t.im, 1.05 * 0.1f64.sin(), epsilon = 1e-15);
    }

    #[test]
    fn zero_impedance_is_degenerate() {
        let err = branch_pi_params(&line(7, 1, 2, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateBranch(7)));
    }

    #[test]
    fn connectivity_examples() {
        let ring = grid(
            vec![bus(1, BusType::Ref), bus(2, BusType::Pq), bus(3, BusType::Pq)],
            vec![line(1, 1, 2, 0.0, 0.1), line(2, 2, 3, 0.0, 0.1), line(3, 3, 1, 0.0, 0.1)],
        );
        assert!(is_connected(&ring));

        let chain_cut = grid(
            vec![bus(1, BusType::Ref), bus(2, BusType::Pq), bus(3, BusType::Pq)],
            vec![line(1, 1, 2, 0.0, 0.1)],
        );
        assert!(!is_connected(&chain_cut));

        let single = grid(vec![bus(1, BusType::Ref)], vec![]);
        assert!(is_connected(&single));
    }

    #[test]
    fn inactive_buses_are_ignored_for_connectivity() {
        let g = grid(
            vec![bus(1, BusType::Ref), bus(2, BusType::Pq), bus(3, BusType::Inactive)],
            vec![line(1, 1, 2, 0.0, 0.1)],
        );
        assert!(is_connected(&g));
        let pruned = g.prune_inactive();
        assert_eq!(pruned.buses.len(), 2);
    }

    #[test]
    fn validate_rejects_missing_reference() {
        let g = grid(vec![bus(1, BusType::Pq), bus(2, BusType::Pq)], vec![line(1, 1, 2, 0.0, 0.1)]);
        assert!(matches!(g.validate(), Err(Error::NoReferenceBus)));
    }
}
