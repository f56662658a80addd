//! Differentiable AC physics on a [`Tape`].
//!
//! Shared by the model loss and the penalty labeler. Several grids can be
//! stacked into one [`PhysicsConsts`]; per-example weights turn sums over the
//! stack into sums of per-example means.

use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{branch_pi_params, Grid};

/// Per-element constants of one or more stacked grids, in grid order.
#[derive(Debug, Clone)]
pub struct PhysicsConsts {
    pub n_examples: usize,
    pub n_bus: usize,
    pub n_gen: usize,
    pub n_branch: usize,
    /// Element ranges of each example: `bus_offsets[e]..bus_offsets[e + 1]`.
    pub bus_offsets: Vec<usize>,
    pub gen_offsets: Vec<usize>,
    pub branch_offsets: Vec<usize>,
    pub gen_bus: Arc<Vec<usize>>,
    pub br_from: Arc<Vec<usize>>,
    pub br_to: Arc<Vec<usize>>,
    // Flow coefficients: with Y = g + jb and tap t,
    // k_pf = g/t^2, k_qf = -(b + b_fr)/t^2, k_pt = g, k_qt = -(b + b_to),
    // g1 = g/t, b1 = b/t.
    pub k_pf: Vec<f64>,
    pub k_qf: Vec<f64>,
    pub k_pt: Vec<f64>,
    pub k_qt: Vec<f64>,
    pub g1: Vec<f64>,
    pub b1: Vec<f64>,
    pub shift: Vec<f64>,
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
    pub gs: Vec<f64>,
    pub bs: Vec<f64>,
    pub vmin: Vec<f64>,
    pub vmax: Vec<f64>,
    pub pmin: Vec<f64>,
    pub pmax: Vec<f64>,
    pub qmin: Vec<f64>,
    pub qmax: Vec<f64>,
    /// 0 at reference buses, 1 elsewhere.
    pub ref_mask: Vec<f64>,
    pub angmin: Vec<f64>,
    pub angmax: Vec<f64>,
    /// Branch positions with a thermal limit, and those limits.
    pub rated: Arc<Vec<usize>>,
    pub rate: Array2<f64>,
    /// Weight of each entity in its example's mean, divided by the number of
    /// examples so that weighted sums give the batch mean.
    pub w_bus: Vec<f64>,
    pub w_gen: Vec<f64>,
    pub w_branch: Vec<f64>,
    pub w_rated: Vec<f64>,
    pub gen_cost_c2: Vec<f64>,
    pub gen_cost_c1: Vec<f64>,
}

fn weights(offsets: &[usize], subset_counts: Option<&[usize]>, n_examples: usize) -> Vec<f64> {
    let mut w = Vec::new();
    for e in 0..n_examples {
        let count = match subset_counts {
            Some(c) => c[e],
            None => offsets[e + 1] - offsets[e],
        };
        let v = if count > 0 { 1.0 / (count as f64 * n_examples as f64) } else { 0.0 };
        w.extend(std::iter::repeat_n(v, count));
    }
    w
}

impl PhysicsConsts {
    /// Stack `grids`. Grids must not contain inactive buses.
    pub fn new(grids: &[&Grid]) -> Result<Self> {
        let mut c = PhysicsConsts {
            n_examples: grids.len(),
            n_bus: 0,
            n_gen: 0,
            n_branch: 0,
            bus_offsets: vec![0],
            gen_offsets: vec![0],
            branch_offsets: vec![0],
            gen_bus: Arc::new(Vec::new()),
            br_from: Arc::new(Vec::new()),
            br_to: Arc::new(Vec::new()),
            k_pf: Vec::new(),
            k_qf: Vec::new(),
            k_pt: Vec::new(),
            k_qt: Vec::new(),
            g1: Vec::new(),
            b1: Vec::new(),
            shift: Vec::new(),
            pd: Vec::new(),
            qd: Vec::new(),
            gs: Vec::new(),
            bs: Vec::new(),
            vmin: Vec::new(),
            vmax: Vec::new(),
            pmin: Vec::new(),
            pmax: Vec::new(),
            qmin: Vec::new(),
            qmax: Vec::new(),
            ref_mask: Vec::new(),
            angmin: Vec::new(),
            angmax: Vec::new(),
            rated: Arc::new(Vec::new()),
            rate: Array2::zeros((0, 1)),
            w_bus: Vec::new(),
            w_gen: Vec::new(),
            w_branch: Vec::new(),
            w_rated: Vec::new(),
            gen_cost_c2: Vec::new(),
            gen_cost_c1: Vec::new(),
        };
        let (mut gen_bus, mut br_from, mut br_to, mut rated, mut rate) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut rated_counts = Vec::new();
        for grid in grids {
            if grid.has_inactive() {
                return Err(Error::InvalidGrid(
                    "inactive buses must be pruned before batching".into(),
                ));
            }
            let topo = grid.topology()?;
            let (b0, e0) = (c.n_bus, c.n_branch);
            let n = grid.buses.len();
            let mut pd = vec![0.0; n];
            let mut qd = vec![0.0; n];
            let mut gs = vec![0.0; n];
            let mut bs = vec![0.0; n];
            for (l, &b) in grid.loads.iter().zip(&topo.load_bus) {
                pd[b] += l.pd;
                qd[b] += l.qd;
            }
            for (s, &b) in grid.shunts.iter().zip(&topo.shunt_bus) {
                gs[b] += s.gs;
                bs[b] += s.bs;
            }
            c.pd.extend(pd);
            c.qd.extend(qd);
            c.gs.extend(gs);
            c.bs.extend(bs);
            for b in &grid.buses {
                c.vmin.push(b.vmin);
                c.vmax.push(b.vmax);
                c.ref_mask.push(if b.bus_type == crate::grid::BusType::Ref { 0.0 } else { 1.0 });
            }
            for (g, &b) in grid.generators.iter().zip(&topo.gen_bus) {
                gen_bus.push(b0 + b);
                c.pmin.push(g.pmin);
                c.pmax.push(g.pmax);
                c.qmin.push(g.qmin);
                c.qmax.push(g.qmax);
                c.gen_cost_c2.push(g.cost_squared);
                c.gen_cost_c1.push(g.cost_linear);
            }
            let mut n_rated = 0;
            for (k, br) in grid.branches.iter().enumerate() {
                let pi = branch_pi_params(br)?;
                let (g, b) = (pi.y.re, pi.y.im);
                let t = br.tap;
                br_from.push(b0 + topo.branch_from[k]);
                br_to.push(b0 + topo.branch_to[k]);
                c.k_pf.push(g / (t * t));
                c.k_qf.push(-(b + br.b_fr) / (t * t));
                c.k_pt.push(g);
                c.k_qt.push(-(b + br.b_to));
                c.g1.push(g / t);
                c.b1.push(b / t);
                c.shift.push(br.shift);
                c.angmin.push(br.angmin);
                c.angmax.push(br.angmax);
                if let Some(limit) = br.thermal_limit() {
                    rated.push(e0 + k);
                    rate.push(limit);
                    n_rated += 1;
                }
            }
            rated_counts.push(n_rated);
            c.n_bus += n;
            c.n_gen += grid.generators.len();
            c.n_branch += grid.branches.len();
            c.bus_offsets.push(c.n_bus);
            c.gen_offsets.push(c.n_gen);
            c.branch_offsets.push(c.n_branch);
        }
        let ne = grids.len();
        c.w_bus = weights(&c.bus_offsets, None, ne);
        c.w_gen = weights(&c.gen_offsets, None, ne);
        c.w_branch = weights(&c.branch_offsets, None, ne);
        c.w_rated = weights(&c.branch_offsets, Some(&rated_counts), ne);
        c.rate = Array2::from_shape_vec((rate.len(), 1), rate).expect("column");
        c.gen_bus = Arc::new(gen_bus);
        c.br_from = Arc::new(br_from);
        c.br_to = Arc::new(br_to);
        c.rated = Arc::new(rated);
        Ok(c)
    }
}

/// `sigmoid(raw) * (hi - lo) + lo` elementwise.
pub fn bounded(t: &mut Tape, raw: Var, lo: &[f64], hi: &[f64]) -> Var {
    let s = t.sigmoid(raw);
    let range: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let r = t.column(&range);
    let l = t.column(lo);
    let scaled = t.mul(s, r);
    t.add(scaled, l)
}

#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    pub pf: Var,
    pub qf: Var,
    pub pt: Var,
    pub qt: Var,
}

/// Branch flows at both ends from bus angles and magnitudes.
pub fn branch_flows(t: &mut Tape, c: &PhysicsConsts, va: Var, vm: Var) -> FlowVars {
    let va_f = t.gather_rows(va, &c.br_from);
    let va_t = t.gather_rows(va, &c.br_to);
    let vm_f = t.gather_rows(vm, &c.br_from);
    let vm_t = t.gather_rows(vm, &c.br_to);
    let diff = t.sub(va_f, va_t);
    let shift = t.column(&c.shift);
    let delta = t.sub(diff, shift);
    let cos = t.cos(delta);
    let sin = t.sin(delta);
    let g1 = t.column(&c.g1);
    let b1 = t.column(&c.b1);
    let gc = t.mul(g1, cos);
    let gs = t.mul(g1, sin);
    let bc = t.mul(b1, cos);
    let bs = t.mul(b1, sin);
    let vf2 = t.square(vm_f);
    let vt2 = t.square(vm_t);
    let vv = t.mul(vm_f, vm_t);

    let side = |t: &mut Tape, k: &[f64], v2: Var, a: Var, b: Var, plus: bool, minus: bool| {
        let kc = t.column(k);
        let own = t.mul(kc, v2);
        let ab = if plus { t.add(a, b) } else { t.sub(a, b) };
        let cross = t.mul(vv, ab);
        if minus {
            t.sub(own, cross)
        } else {
            t.add(own, cross)
        }
    };
    let pf = side(t, &c.k_pf, vf2, gc, bs, true, true);
    let qf = side(t, &c.k_qf, vf2, gs, bc, false, true);
    let pt = side(t, &c.k_pt, vt2, gc, bs, false, true);
    let qt = side(t, &c.k_qt, vt2, gs, bc, true, false);
    FlowVars { pf, qf, pt, qt }
}

#[derive(Debug, Clone, Copy)]
pub struct DegreeVars {
    pub p_balance: Var,
    pub q_balance: Var,
    /// `None` when no branch has a thermal limit.
    pub thermal_from: Option<Var>,
    pub thermal_to: Option<Var>,
    pub angle_diff: Var,
}

/// Signed real and reactive bus mismatches (generation minus demand, shunt
/// consumption and branch withdrawals).
pub fn bus_mismatch(t: &mut Tape, c: &PhysicsConsts, vm: Var, pg: Var, qg: Var, f: &FlowVars) -> (Var, Var) {
    let n = c.n_bus;
    let p_gen = t.scatter_add_rows(pg, &c.gen_bus, n);
    let q_gen = t.scatter_add_rows(qg, &c.gen_bus, n);
    let pf_out = t.scatter_add_rows(f.pf, &c.br_from, n);
    let pt_out = t.scatter_add_rows(f.pt, &c.br_to, n);
    let qf_out = t.scatter_add_rows(f.qf, &c.br_from, n);
    let qt_out = t.scatter_add_rows(f.qt, &c.br_to, n);
    let vm2 = t.square(vm);
    let gs = t.column(&c.gs);
    let bs = t.column(&c.bs);
    let pd = t.column(&c.pd);
    let qd = t.column(&c.qd);
    let p_sh = t.mul(gs, vm2);
    let q_sh = t.mul(bs, vm2);

    let p1 = t.sub(p_gen, pd);
    let p2 = t.sub(p1, p_sh);
    let p3 = t.sub(p2, pf_out);
    let p = t.sub(p3, pt_out);
    let q1 = t.sub(q_gen, qd);
    let q2 = t.add(q1, q_sh);
    let q3 = t.sub(q2, qf_out);
    let q = t.sub(q3, qt_out);
    (p, q)
}

/// Violation degrees of the families that are not satisfied by
/// construction.
pub fn violable_degrees(t: &mut Tape, c: &PhysicsConsts, va: Var, vm: Var, pg: Var, qg: Var, f: &FlowVars) -> DegreeVars {
    let (p, q) = bus_mismatch(t, c, vm, pg, qg, f);
    let p_balance = t.abs(p);
    let q_balance = t.abs(q);
    let (thermal_from, thermal_to) = if c.rated.is_empty() {
        (None, None)
    } else {
        let pf = t.gather_rows(f.pf, &c.rated);
        let qf = t.gather_rows(f.qf, &c.rated);
        let pt = t.gather_rows(f.pt, &c.rated);
        let qt = t.gather_rows(f.qt, &c.rated);
        (Some(t.hinge_norm(pf, qf, &c.rate)), Some(t.hinge_norm(pt, qt, &c.rate)))
    };
    let va_f = t.gather_rows(va, &c.br_from);
    let va_t = t.gather_rows(va, &c.br_to);
    let diff = t.sub(va_f, va_t);
    let lo = t.column(&c.angmin);
    let hi = t.column(&c.angmax);
    let below = t.sub(lo, diff);
    let above = t.sub(diff, hi);
    let below = t.relu(below);
    let above = t.relu(above);
    let angle_diff = t.add(below, above);
    DegreeVars {
        p_balance,
        q_balance,
        thermal_from,
        thermal_to,
        angle_diff,
    }
}

/// `sum(x .* w)` as a `1 x 1` value.
pub fn weighted_sum(t: &mut Tape, x: Var, w: &[f64]) -> Var {
    let wc = t.column(w);
    let xw = t.mul(x, wc);
    t.sum(xw)
}

/// Sum over the five violable families of their per-example mean degree,
/// averaged over examples.
pub fn constraint_term(t: &mut Tape, c: &PhysicsConsts, d: &DegreeVars) -> Var {
    let mut terms = vec![
        weighted_sum(t, d.p_balance, &c.w_bus),
        weighted_sum(t, d.q_balance, &c.w_bus),
        weighted_sum(t, d.angle_diff, &c.w_branch),
    ];
    if let (Some(tf), Some(tt)) = (d.thermal_from, d.thermal_to) {
        terms.push(weighted_sum(t, tf, &c.w_rated));
        terms.push(weighted_sum(t, tt, &c.w_rated));
    }
    let mut acc = terms[0];
    for &x in &terms[1..] {
        acc = t.add(acc, x);
    }
    acc
}
