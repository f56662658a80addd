//! Test-split evaluation: supervised metrics, feasibility, optimality, power
//! flow convergence and timings, before and after restoration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mse, optimality_ratio, trmae, TRMAE_THRESHOLD};
use crate::acpf::restore;
use crate::baselines::solve_dcopf;
use crate::case_io::Example;
use crate::constraints::{objective_cost, violation_degrees, Family, FamilyDegrees, ViolationReport};
use crate::error::{Error, Result};
use crate::gnn::{predict, Batch, ModelParams};
use crate::graph::StandardizationStats;
use crate::grid::{BranchKind, BusType, Grid, OpfSolution};

/// Thresholds of the feasibility share tables.
pub const FEASIBILITY_THRESHOLDS: [f64; 4] = [1e-2, 1e-4, 1e-6, 1e-8];

/// Feature keys of the supervised tables, in display order.
pub const FEATURES: [&str; 12] = [
    "va",
    "vm",
    "pg",
    "qg",
    "line/pf",
    "line/pt",
    "line/qf",
    "line/qt",
    "transformer/pf",
    "transformer/pt",
    "transformer/qf",
    "transformer/qt",
];

/// A solver's output for one example, before restoration.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub solution: OpfSolution,
    /// False for solvers that produce no reactive quantities.
    pub reactive: bool,
    pub elapsed: Duration,
}

/// What produced the solutions under evaluation.
pub enum Method<'a> {
    Model {
        params: &'a ModelParams,
        stats: &'a StandardizationStats,
        batch_size: usize,
    },
    DcOpf,
    /// Externally produced solutions, one per example.
    Solutions(&'a [OpfSolution]),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    /// `None` marks a feature that is absent or has no qualifying entries.
    pub trmae: BTreeMap<String, Option<f64>>,
    pub mse: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdShare {
    pub tau: f64,
    /// Percentage of entities with degree below `tau`.
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub label: String,
    /// Mean over examples of the per-example mean degree.
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub below: Vec<ThresholdShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub mean_ms: f64,
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostPf {
    /// Share of examples whose power flow converged, in percent.
    pub convergence_percent: f64,
    pub converged: usize,
    pub features: FeatureMetrics,
    pub feasibility: Vec<FeasibilityRow>,
    pub optimality_percent: Option<f64>,
    /// Prediction plus restoration time.
    pub timing: Option<Timings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    /// Examples for which the solver produced nothing.
    pub failed: usize,
    pub pre_pf_features: FeatureMetrics,
    pub pre_pf_feasibility: Vec<FeasibilityRow>,
    pub pre_pf_optimality_percent: Option<f64>,
    pub pre_pf_timing: Option<Timings>,
    pub post_pf: Option<PostPf>,
}

fn branch_feature<'a>(sol: &'a OpfSolution, name: &str) -> &'a [f64] {
    match name {
        "pf" => &sol.pf,
        "pt" => &sol.pt,
        "qf" => &sol.qf,
        _ => &sol.qt,
    }
}

/// Values of feature `key` on `grid`, selecting branches by kind.
fn feature_values(grid: &Grid, sol: &OpfSolution, key: &str) -> Vec<f64> {
    let pick = |v: &[f64], kind: BranchKind| -> Vec<f64> {
        grid.branches
            .iter()
            .zip(v)
            .filter(|(b, _)| b.kind == kind)
            .map(|(_, x)| *x)
            .collect()
    };
    match key.split_once('/') {
        Some(("line", f)) => pick(branch_feature(sol, f), BranchKind::AcLine),
        Some((_, f)) => pick(branch_feature(sol, f), BranchKind::Transformer),
        None => match key {
            "va" => sol.va.clone(),
            "vm" => sol.vm.clone(),
            "pg" => sol.pg.clone(),
            _ => sol.qg.clone(),
        },
    }
}

fn is_reactive(key: &str) -> bool {
    key == "qg" || key.ends_with("/qf") || key.ends_with("/qt")
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Supervised metrics averaged over examples. Reactive features are absent
/// when any prediction lacks them.
fn feature_metrics(items: &[(&Grid, &OpfSolution, &OpfSolution)], reactive: bool) -> Result<FeatureMetrics> {
    let mut out = FeatureMetrics::default();
    for key in FEATURES {
        if !reactive && is_reactive(key) {
            out.trmae.insert(key.to_string(), None);
            out.mse.insert(key.to_string(), None);
            continue;
        }
        let mut t = Vec::new();
        let mut m = Vec::new();
        for (grid, pred, target) in items {
            let p = feature_values(grid, pred, key);
            let y = feature_values(grid, target, key);
            if let Some(v) = trmae(&p, &y, TRMAE_THRESHOLD)? {
                t.push(v);
            }
            if let Some(v) = mse(&p, &y)? {
                m.push(v);
            }
        }
        out.trmae.insert(key.to_string(), mean(t));
        out.mse.insert(key.to_string(), mean(m));
    }
    Ok(out)
}

type RowSelector = (String, Box<dyn Fn(&Grid, &ViolationReport) -> FamilyDegrees + Sync>);

fn family_row(f: Family) -> RowSelector {
    (f.label().to_string(), Box::new(move |_, r| r.family(f).clone()))
}

fn pre_pf_rows() -> Vec<RowSelector> {
    [
        Family::ThermalFrom,
        Family::ThermalTo,
        Family::AngleDiff,
        Family::VmBounds,
        Family::QBalance,
        Family::PBalance,
    ]
    .into_iter()
    .map(family_row)
    .collect()
}

fn post_pf_rows() -> Vec<RowSelector> {
    let bus_kind = |label: &str, want: BusType| -> RowSelector {
        (
            label.to_string(),
            Box::new(move |g: &Grid, r: &ViolationReport| r.vm_bounds.filtered(|i| g.buses[i].bus_type == want)),
        )
    };
    let slack = |label: &str, f: Family| -> RowSelector {
        (
            label.to_string(),
            Box::new(move |g: &Grid, r: &ViolationReport| {
                let topo = g.topology().expect("validated grid");
                r.family(f).filtered(|k| topo.ref_buses.contains(&topo.gen_bus[k]))
            }),
        )
    };
    vec![
        family_row(Family::ThermalFrom),
        family_row(Family::ThermalTo),
        family_row(Family::AngleDiff),
        bus_kind("Bus voltage bounds pq", BusType::Pq),
        bus_kind("Bus voltage bounds pv", BusType::Pv),
        slack("Generator reactive power bounds slack", Family::QgBounds),
        slack("Generator real power bounds slack", Family::PgBounds),
        family_row(Family::QBalance),
        family_row(Family::PBalance),
    ]
}

fn feasibility(items: &[(&Grid, ViolationReport)], rows: &[RowSelector]) -> Vec<FeasibilityRow> {
    rows.iter()
        .map(|(label, select)| {
            let per: Vec<FamilyDegrees> = items.iter().map(|(g, r)| select(g, r)).collect();
            let mut pooled = FamilyDegrees::default();
            for d in &per {
                pooled.entities.extend(&d.entities);
                pooled.degrees.extend(&d.degrees);
            }
            FeasibilityRow {
                label: label.clone(),
                mean: mean(per.iter().filter_map(FamilyDegrees::mean)),
                max: pooled.max(),
                below: FEASIBILITY_THRESHOLDS
                    .iter()
                    .map(|&tau| ThresholdShare {
                        tau,
                        percent: pooled.fraction_below(tau),
                    })
                    .collect(),
            }
        })
        .collect()
}

fn timings(v: &[Duration]) -> Option<Timings> {
    if v.is_empty() {
        return None;
    }
    let mut ms: Vec<f64> = v.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    let median = if n % 2 == 1 { ms[n / 2] } else { 0.5 * (ms[n / 2 - 1] + ms[n / 2]) };
    Some(Timings {
        mean_ms: ms.iter().sum::<f64>() / n as f64,
        median_ms: median,
    })
}

fn optimality(items: &[(&Grid, &OpfSolution, &OpfSolution)]) -> Result<Option<f64>> {
    let ratios = items
        .iter()
        .map(|(g, p, y)| optimality_ratio(objective_cost(g, p), objective_cost(g, y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(ratios))
}

/// Run `method` on every example and time it.
pub fn predictions(method: &Method<'_>, examples: &[Example]) -> Result<Vec<Option<Prediction>>> {
    match method {
        Method::Solutions(s) => {
            if s.len() != examples.len() {
                return Err(Error::ShapeMismatch(format!("{} solutions for {} examples", s.len(), examples.len())));
            }
            Ok(s.iter()
                .map(|sol| {
                    Some(Prediction {
                        solution: sol.clone(),
                        reactive: true,
                        elapsed: Duration::ZERO,
                    })
                })
                .collect())
        }
        Method::DcOpf => Ok(examples
            .par_iter()
            .map(|ex| {
                let t0 = Instant::now();
                let dc = solve_dcopf(&ex.grid).ok()?;
                let mut sol = OpfSolution::zeros(&ex.grid);
                sol.va = dc.va;
                sol.vm = dc.vm;
                sol.pg = dc.pg;
                sol.pt = dc.pf.iter().map(|p| -p).collect();
                sol.pf = dc.pf;
                Some(Prediction {
                    solution: sol,
                    reactive: false,
                    elapsed: t0.elapsed(),
                })
            })
            .collect()),
        Method::Model {
            params,
            stats,
            batch_size,
        } => {
            let mut out = Vec::with_capacity(examples.len());
            for chunk in examples.chunks((*batch_size).max(1)) {
                let t0 = Instant::now();
                let items: Vec<_> = chunk.iter().map(|e| (&e.grid, None)).collect();
                let batch = Batch::new(&items, stats)?;
                let grids: Vec<&Grid> = chunk.iter().map(|e| &e.grid).collect();
                let sols = predict(params, &batch, &grids)?;
                let each = t0.elapsed() / chunk.len() as u32;
                out.extend(sols.into_iter().map(|solution| {
                    Some(Prediction {
                        solution,
                        reactive: true,
                        elapsed: each,
                    })
                }));
            }
            Ok(out)
        }
    }
}

/// Evaluate `method` on `examples`, which must carry reference solutions.
pub fn evaluate(method: Method<'_>, examples: &[Example], with_pf: bool) -> Result<EvalReport> {
    let preds = predictions(&method, examples)?;
    evaluate_predictions(&preds, examples, with_pf)
}

/// Evaluate precomputed predictions; `None` entries count as failures.
pub fn evaluate_predictions(preds: &[Option<Prediction>], examples: &[Example], with_pf: bool) -> Result<EvalReport> {
    if preds.len() != examples.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} examples", preds.len(), examples.len())));
    }
    let mut refs = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        refs.push(
            ex.solution
                .as_ref()
                .ok_or_else(|| Error::Missing(format!("reference solution for example {i}")))?,
        );
    }
    let ok: Vec<(usize, &Prediction)> = preds.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p))).collect();
    let reactive = ok.iter().all(|(_, p)| p.reactive);

    let triples: Vec<(&Grid, &OpfSolution, &OpfSolution)> =
        ok.iter().map(|(i, p)| (&examples[*i].grid, &p.solution, refs[*i])).collect();
    let audits = triples
        .iter()
        .map(|(g, p, _)| Ok((*g, violation_degrees(g, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut pre_rows = feasibility(&audits, &pre_pf_rows());
    if !reactive {
        pre_rows.retain(|r| r.label != Family::QBalance.label());
    }

    let post_pf = if with_pf {
        let restored: Vec<Option<(OpfSolution, Duration)>> = ok
            .par_iter()
            .map(|(i, p)| {
                let t0 = Instant::now();
                let r = restore(&examples[*i].grid, &p.solution).ok()?;
                r.converged.then(|| (r.solution, p.elapsed + t0.elapsed()))
            })
            .collect();
        let conv: Vec<(usize, &OpfSolution, Duration)> = ok
            .iter()
            .zip(&restored)
            .filter_map(|((i, _), r)| r.as_ref().map(|(s, d)| (*i, s, *d)))
            .collect();
        let triples: Vec<(&Grid, &OpfSolution, &OpfSolution)> =
            conv.iter().map(|(i, s, _)| (&examples[*i].grid, *s, refs[*i])).collect();
        let audits = triples
            .iter()
            .map(|(g, s, _)| Ok((*g, violation_degrees(g, s)?)))
            .collect::<Result<Vec<_>>>()?;
        Some(PostPf {
            convergence_percent: if ok.is_empty() { 0.0 } else { 100.0 * conv.len() as f64 / ok.len() as f64 },
            converged: conv.len(),
            features: feature_metrics(&triples, true)?,
            feasibility: feasibility(&audits, &post_pf_rows()),
            optimality_percent: optimality(&triples)?,
            timing: timings(&conv.iter().map(|c| c.2).collect::<Vec<_>>()),
        })
    } else {
        None
    };

    Ok(EvalReport {
        examples: examples.len(),
        failed: examples.len() - ok.len(),
        pre_pf_features: feature_metrics(&triples, reactive)?,
        pre_pf_feasibility: pre_rows,
        pre_pf_optimality_percent: optimality(&triples)?,
        pre_pf_timing: timings(&ok.iter().map(|(_, p)| p.elapsed).collect::<Vec<_>>()),
        post_pf,
    })
}

fn cell(v: Option<f64>, percent: bool) -> String {
    match v {
        None => "-".to_string(),
        Some(x) if percent => format!("{:.1}%", 100.0 * x),
        Some(x) => format!("{x:.2e}"),
    }
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut w: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.len());
        }
    }
    let line = |out: &mut String, cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<width$}", width = w[0]);
            } else {
                let _ = write!(s, "  {c:>width$}", width = w[i]);
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(out, &header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out.push_str(&"-".repeat(w.iter().sum::<usize>() + 2 * (w.len() - 1)));
    out.push('\n');
    for r in rows {
        line(out, r);
    }
}

fn feasibility_tables(out: &mut String, title: &str, rows: &[FeasibilityRow]) {
    let _ = writeln!(out, "\n{title}");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.label.clone(), cell(r.mean, false), cell(r.max, false)])
        .collect();
    table(out, &["constraint", "mean degree", "max degree"], &body);
    let mut header = vec!["share below".to_string()];
    header.extend(FEASIBILITY_THRESHOLDS.iter().map(|t| format!("{t:.0e}")));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.label.clone()];
            v.extend(r.below.iter().map(|s| s.percent.map_or("-".into(), |p| format!("{p:.2}%"))));
            v
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    out.push('\n');
    table(out, &h, &body);
}

impl EvalReport {
    /// Aligned plain-text tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "examples: {}  failed: {}", self.examples, self.failed);
        let _ = writeln!(out, "\nsupervised metrics");
        let post = self.post_pf.as_ref();
        let rows: Vec<Vec<String>> = FEATURES
            .iter()
            .map(|k| {
                let get = |m: &FeatureMetrics, t: bool| {
                    let map = if t { &m.trmae } else { &m.mse };
                    map.get(*k).copied().flatten()
                };
                vec![
                    k.to_string(),
                    cell(get(&self.pre_pf_features, true), true),
                    cell(get(&self.pre_pf_features, false), false),
                    post.map_or("-".into(), |p| cell(get(&p.features, true), true)),
                    post.map_or("-".into(), |p| cell(get(&p.features, false), false)),
                ]
            })
            .collect();
        table(&mut out, &["feature", "TRMAE pre", "MSE pre", "TRMAE post", "MSE post"], &rows);
        feasibility_tables(&mut out, "pre-PF feasibility", &self.pre_pf_feasibility);
        if let Some(p) = post {
            feasibility_tables(&mut out, "post-PF feasibility", &p.feasibility);
        }
        let pct = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.3}%"));
        let ms = |t: &Option<Timings>| t.as_ref().map_or("-".into(), |t| format!("{:.3} / {:.3}", t.mean_ms, t.median_ms));
        let _ = writeln!(out);
        let mut rows = vec![
            vec!["optimality pre-PF".to_string(), pct(self.pre_pf_optimality_percent)],
            vec!["time pre-PF ms (mean / median)".to_string(), ms(&self.pre_pf_timing)],
        ];
        if let Some(p) = post {
            rows.push(vec!["optimality post-PF".into(), pct(p.optimality_percent)]);
            rows.push(vec!["PF convergence".into(), format!("{:.1}%", p.convergence_percent)]);
            rows.push(vec!["time post-PF ms (mean / median)".into(), ms(&p.timing)]);
        }
        table(&mut out, &["summary", "value"], &rows);
        out
    }
}
