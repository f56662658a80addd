//! Training loss and its gradient.
//!
//! `total = supervised + C * constraint`, where
//!
//! - `supervised` sums three group means of squared standardized errors:
//!   bus (`va`, `vm`), generator (`pg`, `qg`) and branch (`pf`, `qf`, `pt`,
//!   `qt`);
//! - `constraint` sums the mean violation degree of the families the model
//!   does not satisfy by construction: real and reactive balance, thermal
//!   limits at both ends and angle differences, in per-unit.
//!
//! Both terms are computed per example and averaged over the batch.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::batch::Batch;
use super::model::{forward_tape, Outputs, ParamVars};
use super::params::ModelParams;
use super::physics::{branch_flows, constraint_term, violable_degrees, weighted_sum};
use crate::autodiff::{Tape, Var};
use crate::constraints::violation_degrees;
use crate::error::{Error, Result};
use crate::graph::TargetStats;
use crate::grid::{Grid, OpfSolution};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub supervised: f64,
    pub constraint: f64,
}

fn group_mean(pairs: &[(&[f64], &[f64], f64)]) -> Option<f64> {
    let n: usize = pairs.iter().map(|(p, _, _)| p.len()).sum();
    if n == 0 {
        return None;
    }
    let s: f64 = pairs
        .iter()
        .flat_map(|(p, t, sigma)| p.iter().zip(t.iter()).map(move |(a, b)| ((a - b) / sigma).powi(2)))
        .sum();
    Some(s / n as f64)
}

/// Loss of one prediction against its reference on `grid`.
///
/// With `target = None` only the constraint term is evaluated and the
/// supervised part is reported as zero.
pub fn loss(pred: &OpfSolution, target: Option<&OpfSolution>, grid: &Grid, stats: &TargetStats, c: f64) -> Result<LossParts> {
    let supervised = match target {
        None => 0.0,
        Some(tg) => {
            pred.check_shape(grid)?;
            tg.check_shape(grid)?;
            let bus = group_mean(&[(&pred.va, &tg.va, stats.va.1), (&pred.vm, &tg.vm, stats.vm.1)]);
            let gen = group_mean(&[(&pred.pg, &tg.pg, stats.pg.1), (&pred.qg, &tg.qg, stats.qg.1)]);
            let br = group_mean(&[
                (&pred.pf, &tg.pf, stats.pf.1),
                (&pred.qf, &tg.qf, stats.qf.1),
                (&pred.pt, &tg.pt, stats.pt.1),
                (&pred.qt, &tg.qt, stats.qt.1),
            ]);
            [bus, gen, br].into_iter().flatten().sum()
        }
    };
    let r = violation_degrees(grid, pred)?;
    let constraint: f64 = [&r.p_balance, &r.q_balance, &r.thermal_from, &r.thermal_to, &r.angle_diff]
        .iter()
        .filter_map(|f| f.mean())
        .sum();
    Ok(LossParts {
        total: supervised + c * constraint,
        supervised,
        constraint,
    })
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub supervised: Var,
    pub constraint: Var,
    pub outputs: Outputs,
}

impl LossVars {
    fn parts(&self, t: &Tape) -> LossParts {
        LossParts {
            total: t.scalar(self.total),
            supervised: t.scalar(self.supervised),
            constraint: t.scalar(self.constraint),
        }
    }
}

/// Record the batch loss on `t`.
pub fn loss_tape(t: &mut Tape, p: &ParamVars, params: &ModelParams, batch: &Batch) -> Result<LossVars> {
    let out = forward_tape(t, p, params, batch)?;
    let c = &batch.consts;
    let flows = branch_flows(t, c, out.va, out.vm);
    let degrees = violable_degrees(t, c, out.va, out.vm, out.pg, out.qg, &flows);
    let con = constraint_term(t, c, &degrees);
    let sup = match &batch.targets {
        None => t.constant(Array2::zeros((1, 1))),
        Some(tg) => {
            let s = &batch.target_stats;
            let sq = |t: &mut Tape, pred: Var, target: &[f64], sigma: f64, w: &[f64], share: f64| {
                let tc = t.column(target);
                let d = t.sub(pred, tc);
                let d = t.scale(d, 1.0 / sigma);
                let d2 = t.square(d);
                let term = weighted_sum(t, d2, w);
                t.scale(term, share)
            };
            let terms = [
                sq(t, out.va, &tg.va, s.va.1, &c.w_bus, 0.5),
                sq(t, out.vm, &tg.vm, s.vm.1, &c.w_bus, 0.5),
                sq(t, out.pg, &tg.pg, s.pg.1, &c.w_gen, 0.5),
                sq(t, out.qg, &tg.qg, s.qg.1, &c.w_gen, 0.5),
                sq(t, flows.pf, &tg.pf, s.pf.1, &c.w_branch, 0.25),
                sq(t, flows.qf, &tg.qf, s.qf.1, &c.w_branch, 0.25),
                sq(t, flows.pt, &tg.pt, s.pt.1, &c.w_branch, 0.25),
                sq(t, flows.qt, &tg.qt, s.qt.1, &c.w_branch, 0.25),
            ];
            terms[1..].iter().fold(terms[0], |acc, &x| t.add(acc, x))
        }
    };
    let weighted = t.scale(con, params.config.constraint_weight);
    let total = t.add(sup, weighted);
    Ok(LossVars {
        total,
        supervised: sup,
        constraint: con,
        outputs: out,
    })
}

/// Batch loss and its gradient with respect to every parameter tensor.
///
/// A non-finite loss is reported with the position (within the batch) of
/// the first example whose own loss is non-finite.
pub fn gradient(params: &ModelParams, batch: &Batch) -> Result<(LossParts, BTreeMap<String, Array2<f64>>)> {
    let mut t = Tape::new();
    let p = ParamVars::register(&mut t, params, true);
    let vars = loss_tape(&mut t, &p, params, batch)?;
    let parts = vars.parts(&t);
    if !parts.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            example: first_non_finite(&t, &vars.outputs, batch).unwrap_or(0),
        });
    }
    let grads = t.backward(vars.total);
    let out = params
        .tensors
        .iter()
        .map(|(name, v)| {
            let var = p.get(name).expect("registered");
            (name.clone(), grads.get_or_zeros(var, v.dim()))
        })
        .collect();
    Ok((parts, out))
}

/// Loss of a batch without recording gradients.
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<LossParts> {
    let mut t = Tape::new();
    let p = ParamVars::register(&mut t, params, false);
    Ok(loss_tape(&mut t, &p, params, batch)?.parts(&t))
}

fn first_non_finite(t: &Tape, out: &Outputs, batch: &Batch) -> Option<usize> {
    let c = &batch.consts;
    let bad = |v: Var, lo: usize, hi: usize| t.value(v).column(0).iter().skip(lo).take(hi - lo).any(|x| !x.is_finite());
    (0..c.n_examples).find(|&e| {
        let (b0, b1) = (c.bus_offsets[e], c.bus_offsets[e + 1]);
        let (g0, g1) = (c.gen_offsets[e], c.gen_offsets[e + 1]);
        bad(out.va, b0, b1) || bad(out.vm, b0, b1) || bad(out.pg, g0, g1) || bad(out.qg, g0, g1)
    })
}
