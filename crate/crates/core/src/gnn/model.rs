//! Forward pass.

use std::collections::HashMap;

use ndarray::Array2;

use super::batch::Batch;
use super::params::ModelParams;
use super::physics::bounded;
use crate::autodiff::{Tape, Var};
use crate::constraints::derive_branch_flows;
use crate::error::{Error, Result};
use crate::graph::{EdgeType, NodeType, TypedGraph};
use crate::grid::{Grid, OpfSolution};

/// Parameters recorded on a tape, by name.
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    /// Record every tensor of `params`; `trainable` decides whether they
    /// receive gradients.
    pub fn register(t: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { t.param(v.clone()) } else { t.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Decoded outputs as stacked columns.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub va: Var,
    pub vm: Var,
    pub pg: Var,
    pub qg: Var,
}

fn update_mlp(t: &mut Tape, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = t.linear(x, p.get(&format!("{prefix}/l1w"))?, p.get(&format!("{prefix}/l1b"))?);
    let h = t.relu(h);
    let h = t.linear(h, p.get(&format!("{prefix}/l2w"))?, p.get(&format!("{prefix}/l2b"))?);
    Ok(t.layer_norm(h, p.get(&format!("{prefix}/ln_g"))?, p.get(&format!("{prefix}/ln_b"))?))
}

fn decoder(t: &mut Tape, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = t.linear(x, p.get(&format!("{prefix}/l1w"))?, p.get(&format!("{prefix}/l1b"))?);
    let h = t.relu(h);
    let h = t.linear(h, p.get(&format!("{prefix}/l2w"))?, p.get(&format!("{prefix}/l2b"))?);
    let h = t.relu(h);
    Ok(t.linear(h, p.get(&format!("{prefix}/outw"))?, p.get(&format!("{prefix}/outb"))?))
}

fn encode(t: &mut Tape, p: &ParamVars, prefix: &str, features: &Array2<f64>, hidden: usize) -> Result<Var> {
    let b = p.get(&format!("{prefix}/b"))?;
    if features.ncols() == 0 {
        let z = t.constant(Array2::zeros((features.nrows(), hidden)));
        Ok(t.add_row(z, b))
    } else {
        let x = t.constant(features.clone());
        Ok(t.linear(x, p.get(&format!("{prefix}/w"))?, b))
    }
}

fn sum_all(t: &mut Tape, parts: &[Var], rows: usize, hidden: usize) -> Var {
    match parts.split_first() {
        None => t.constant(Array2::zeros((rows, hidden))),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &x| t.add(acc, x)),
    }
}

/// Record the forward pass of `batch` on `t`.
pub fn forward_tape(t: &mut Tape, p: &ParamVars, params: &ModelParams, batch: &Batch) -> Result<Outputs> {
    let cfg = params.config;
    let hidden = cfg.hidden_size;
    let g = &batch.graph;
    let c = &batch.consts;
    if g.num_nodes(NodeType::Bus) != c.n_bus || g.num_nodes(NodeType::Generator) != c.n_gen {
        return Err(Error::ShapeMismatch("graph and grid element counts differ".into()));
    }

    let mut h: Vec<Option<Var>> = Vec::with_capacity(4);
    for nt in NodeType::ALL {
        h.push(if g.num_nodes(nt) == 0 {
            None
        } else {
            Some(encode(t, p, &format!("enc/node/{}", nt.name()), &g.node_features[nt.index()], hidden)?)
        });
    }
    let mut e: Vec<Option<Var>> = Vec::with_capacity(5);
    for et in EdgeType::ALL {
        e.push(if g.num_edges(et) == 0 {
            None
        } else {
            Some(encode(t, p, &format!("enc/edge/{}", et.name()), &g.edge_features[et.index()], hidden)?)
        });
    }

    for s in 0..cfg.num_message_passing_steps {
        for et in EdgeType::ALL {
            let Some(ev) = e[et.index()] else { continue };
            let (st, dt) = et.endpoints();
            let (Some(hs), Some(hd)) = (h[st.index()], h[dt.index()]) else {
                continue;
            };
            let src = t.gather_rows(hs, &g.edge_src[et.index()]);
            let dst = t.gather_rows(hd, &g.edge_dst[et.index()]);
            let input = t.concat_cols(&[ev, src, dst]);
            let m = update_mlp(t, p, &format!("proc/{s}/edge/{}", et.name()), input)?;
            e[et.index()] = Some(t.add(ev, m));
        }
        let mut next = h.clone();
        for nt in NodeType::ALL {
            let Some(hv) = h[nt.index()] else { continue };
            let n = g.num_nodes(nt);
            let mut incoming = Vec::new();
            let mut outgoing = Vec::new();
            for et in EdgeType::ALL {
                let Some(ev) = e[et.index()] else { continue };
                let (st, dt) = et.endpoints();
                if dt == nt {
                    incoming.push(t.scatter_add_rows(ev, &g.edge_dst[et.index()], n));
                }
                if st == nt {
                    outgoing.push(t.scatter_add_rows(ev, &g.edge_src[et.index()], n));
                }
            }
            let inc = sum_all(t, &incoming, n, hidden);
            let out = sum_all(t, &outgoing, n, hidden);
            let input = t.concat_cols(&[hv, inc, out]);
            let m = update_mlp(t, p, &format!("proc/{s}/node/{}", nt.name()), input)?;
            next[nt.index()] = Some(t.add(hv, m));
        }
        h = next;
    }

    let bus_h = h[NodeType::Bus.index()].ok_or_else(|| Error::InvalidGrid("grid without buses".into()))?;
    let raw = decoder(t, p, "dec/bus", bus_h)?;
    let va_raw = t.slice_cols(raw, 0, 1);
    let vm_raw = t.slice_cols(raw, 1, 2);
    let (mu, sigma) = batch.target_stats.va;
    let va_free = t.affine(va_raw, sigma, mu);
    let mask = t.column(&c.ref_mask);
    let va = t.mul(va_free, mask);
    let vm = bounded(t, vm_raw, &c.vmin, &c.vmax);

    let (pg, qg) = match h[NodeType::Generator.index()] {
        Some(gen_h) => {
            let raw = decoder(t, p, "dec/generator", gen_h)?;
            let pg_raw = t.slice_cols(raw, 0, 1);
            let qg_raw = t.slice_cols(raw, 1, 2);
            (bounded(t, pg_raw, &c.pmin, &c.pmax), bounded(t, qg_raw, &c.qmin, &c.qmax))
        }
        None => (t.column(&[]), t.column(&[])),
    };
    Ok(Outputs { va, vm, pg, qg })
}

/// Split stacked outputs into one solution per example, with branch flows
/// derived from the predicted voltages.
pub fn unstack(t: &Tape, out: &Outputs, batch: &Batch, grids: &[&Grid]) -> Result<Vec<OpfSolution>> {
    let c = &batch.consts;
    let col = |v: Var| t.value(v).column(0).to_vec();
    let (va, vm, pg, qg) = (col(out.va), col(out.vm), col(out.pg), col(out.qg));
    grids
        .iter()
        .enumerate()
        .map(|(e, grid)| {
            let b = c.bus_offsets[e]..c.bus_offsets[e + 1];
            let gr = c.gen_offsets[e]..c.gen_offsets[e + 1];
            let va = va[b.clone()].to_vec();
            let vm = vm[b].to_vec();
            let flows = derive_branch_flows(grid, &va, &vm)?;
            Ok(OpfSolution {
                va,
                vm,
                pg: pg[gr.clone()].to_vec(),
                qg: qg[gr].to_vec(),
                pf: flows.pf,
                qf: flows.qf,
                pt: flows.pt,
                qt: flows.qt,
            })
        })
        .collect()
}

/// Predict solutions for every example of a batch.
pub fn predict(params: &ModelParams, batch: &Batch, grids: &[&Grid]) -> Result<Vec<OpfSolution>> {
    let mut t = Tape::new();
    let p = ParamVars::register(&mut t, params, false);
    let out = forward_tape(&mut t, &p, params, batch)?;
    unstack(&t, &out, batch, grids)
}

/// Predict the solution of a single grid from its typed graph.
pub fn forward(params: &ModelParams, graph: &TypedGraph, grid: &Grid) -> Result<OpfSolution> {
    let batch = Batch::from_graphs(&[(grid, None)], &[graph])?;
    Ok(predict(params, &batch, &[grid])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_case;
    use crate::cases;
    use crate::constraints::violation_degrees;
    use crate::gnn::ModelConfig;
    use crate::graph::{to_typed_graph, StandardizationStats};
    use crate::grid::BusType;

    #[test]
    fn outputs_respect_bounds_and_reference() {
        let grid = parse_case(cases::CASE14).unwrap();
        let stats = StandardizationStats::identity();
        let graph = to_typed_graph(&grid, &stats).unwrap();
        for seed in 0..3 {
            let params = ModelParams::init(ModelConfig::new(8, 2), seed).unwrap();
            let sol = forward(&params, &graph, &grid).unwrap();
            let r = violation_degrees(&grid, &sol).unwrap();
            assert!(r.ref_angle.degrees.iter().all(|&d| d == 0.0));
            for fam in [&r.pg_bounds, &r.qg_bounds, &r.vm_bounds] {
                assert!(fam.max().unwrap() <= 1e-12);
            }
            for fam in [&r.ohm_from_p, &r.ohm_from_q, &r.ohm_to_p, &r.ohm_to_q] {
                assert!(fam.max().unwrap() <= 1e-12);
            }
            for (i, b) in grid.buses.iter().enumerate() {
                if b.bus_type == BusType::Ref {
                    assert_eq!(sol.va[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_raw_output_is_the_midpoint() {
        let grid = parse_case(cases::CASE9).unwrap();
        let graph = to_typed_graph(&grid, &StandardizationStats::identity()).unwrap();
        let mut params = ModelParams::init(ModelConfig::new(4, 1), 0).unwrap();
        for name in ["dec/bus/outw", "dec/bus/outb", "dec/generator/outw", "dec/generator/outb"] {
            params.tensors.get_mut(name).unwrap().fill(0.0);
        }
        let sol = forward(&params, &graph, &grid).unwrap();
        for (v, b) in sol.vm.iter().zip(&grid.buses) {
            assert!((v - 0.5 * (b.vmin + b.vmax)).abs() < 1e-15);
        }
    }

    #[test]
    fn batched_prediction_matches_single() {
        let g9 = parse_case(cases::CASE9).unwrap();
        let g14 = parse_case(cases::CASE14).unwrap();
        let stats = StandardizationStats::identity();
        let params = ModelParams::init(ModelConfig::new(8, 2), 1).unwrap();
        let batch = Batch::new(&[(&g9, None), (&g14, None)], &stats).unwrap();
        let both = predict(&params, &batch, &[&g9, &g14]).unwrap();
        let single = forward(&params, &to_typed_graph(&g14, &stats).unwrap(), &g14).unwrap();
        for (a, b) in both[1].va.iter().zip(&single.va) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in both[1].qg.iter().zip(&single.qg) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
