//! Reader for the subset of the MATPOWER case format used by benchmark
//! libraries: `mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch` and a
//! polynomial `mpc.gencost`.
//!
//! Conversion to per unit: powers, ratings and shunt values are divided by
//! `baseMVA`, angles go from degrees to radians, and polynomial costs are
//! rescaled so they apply to per-unit generation. Out-of-service generators
//! and branches are dropped. Each bus with nonzero demand contributes one
//! load, and each bus with a nonzero `Gs`/`Bs` one shunt.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Branch, BranchKind, Bus, BusType, Generator, Grid, Load, Shunt};

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 10;
const BRANCH_COLS: usize = 13;

/// Strip `%` comments, keeping line structure.
fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| match l.find('%') {
            Some(i) => &l[..i],
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Locate `mpc.<name> = <rhs>` and return the right-hand side text after `=`.
fn find_assignment<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let needle = format!("mpc.{name}");
    let mut from = 0;
    while let Some(off) = text[from..].find(&needle) {
        let start = from + off + needle.len();
        let rest = &text[start..];
        let trimmed = rest.trim_start();
        // Reject prefixes such as `mpc.bus_name` when looking for `mpc.bus`.
        if let Some(stripped) = trimmed.strip_prefix('=') {
            return Some(stripped);
        }
        from = start;
    }
    None
}

fn parse_number(token: &str) -> Option<f64> {
    match token {
        "Inf" | "inf" | "+Inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => token.parse().ok(),
    }
}

fn parse_matrix(text: &str, name: &str) -> Result<Vec<Vec<f64>>> {
    let rhs = find_assignment(text, name)
        .ok_or_else(|| Error::MalformedCase(format!("missing matrix mpc.{name}")))?;
    let body = rhs.trim_start();
    let body = body
        .strip_prefix('[')
        .ok_or_else(|| Error::MalformedCase(format!("mpc.{name} is not a matrix")))?;
    let end = body
        .find(']')
        .ok_or_else(|| Error::MalformedCase(format!("unterminated matrix mpc.{name}")))?;
    let mut rows = Vec::new();
    for (r, raw) in body[..end].split([';', '\n']).enumerate() {
        let tokens: Vec<&str> = raw
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let row = tokens
            .iter()
            .map(|t| {
                parse_number(t).ok_or_else(|| {
                    Error::MalformedCase(format!("mpc.{name} row {}: bad number {t:?}", r + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn parse_scalar(text: &str, name: &str) -> Result<f64> {
    let rhs = find_assignment(text, name)
        .ok_or_else(|| Error::MalformedCase(format!("missing scalar mpc.{name}")))?;
    let value = rhs.split(';').next().unwrap_or("").trim();
    parse_number(value).ok_or_else(|| Error::MalformedCase(format!("mpc.{name}: bad value {value:?}")))
}

fn require_cols(rows: &[Vec<f64>], name: &str, cols: usize) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() < cols {
            return Err(Error::MalformedCase(format!(
                "mpc.{name} row {}: {} columns, expected at least {cols}",
                i + 1,
                row.len()
            )));
        }
    }
    Ok(())
}

fn as_id(x: f64, what: &str) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 {
        Ok(x as usize)
    } else {
        Err(Error::MalformedCase(format!("{what}: {x} is not a valid id")))
    }
}

/// Parse a MATPOWER case into a per-unit [`Grid`].
pub fn parse_case(text: &str) -> Result<Grid> {
    let text = strip_comments(text);
    let base_mva = parse_scalar(&text, "baseMVA")?;
    if !(base_mva > 0.0) {
        return Err(Error::MalformedCase("baseMVA must be positive".into()));
    }
    let bus_rows = parse_matrix(&text, "bus")?;
    let gen_rows = parse_matrix(&text, "gen")?;
    let branch_rows = parse_matrix(&text, "branch")?;
    let cost_rows = parse_matrix(&text, "gencost")?;
    require_cols(&bus_rows, "bus", BUS_COLS)?;
    require_cols(&gen_rows, "gen", GEN_COLS)?;
    require_cols(&branch_rows, "branch", BRANCH_COLS)?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut loads = Vec::new();
    let mut shunts = Vec::new();
    for row in &bus_rows {
        let id = as_id(row[0], "bus id")?;
        let bus_type = match row[1] as i64 {
            1 => BusType::Pq,
            2 => BusType::Pv,
            3 => BusType::Ref,
            4 => BusType::Inactive,
            other => {
                return Err(Error::MalformedCase(format!("bus {id}: unknown bus type {other}")))
            }
        };
        buses.push(Bus {
            id,
            base_kv: row[9],
            bus_type,
            vmin: row[12],
            vmax: row[11],
        });
        if row[2] != 0.0 || row[3] != 0.0 {
            loads.push(Load {
                id: loads.len() + 1,
                bus: id,
                pd: row[2] / base_mva,
                qd: row[3] / base_mva,
            });
        }
        if row[4] != 0.0 || row[5] != 0.0 {
            shunts.push(Shunt {
                id: shunts.len() + 1,
                bus: id,
                gs: row[4] / base_mva,
                bs: row[5] / base_mva,
            });
        }
    }
    if !buses.iter().any(|b| b.bus_type == BusType::Ref) {
        return Err(Error::NoReferenceBus);
    }
    let known = |id: usize, context: &str| -> Result<()> {
        if buses.iter().any(|b| b.id == id) {
            Ok(())
        } else {
            Err(Error::UnknownBus { bus: id, context: context.into() })
        }
    };

    if cost_rows.len() < gen_rows.len() {
        return Err(Error::MalformedCase(format!(
            "mpc.gencost has {} rows for {} generators",
            cost_rows.len(),
            gen_rows.len()
        )));
    }
    let mut generators = Vec::new();
    for (k, (row, cost)) in gen_rows.iter().zip(&cost_rows).enumerate() {
        let bus = as_id(row[0], "generator bus")?;
        known(bus, &format!("generator {}", k + 1))?;
        let (c2, c1, c0) = polynomial_cost(cost, k + 1)?;
        if row[7] <= 0.0 {
            continue;
        }
        generators.push(Generator {
            id: k + 1,
            bus,
            mbase: row[6],
            pg: row[1] / base_mva,
            pmin: row[9] / base_mva,
            pmax: row[8] / base_mva,
            qg: row[2] / base_mva,
            qmin: row[4] / base_mva,
            qmax: row[3] / base_mva,
            vg: row[5],
            cost_squared: c2 * base_mva * base_mva,
            cost_linear: c1 * base_mva,
            cost_offset: c0,
        });
    }

    let mut branches = Vec::new();
    for (k, row) in branch_rows.iter().enumerate() {
        let from_bus = as_id(row[0], "branch from bus")?;
        let to_bus = as_id(row[1], "branch to bus")?;
        known(from_bus, &format!("branch {}", k + 1))?;
        known(to_bus, &format!("branch {}", k + 1))?;
        if row[10] <= 0.0 {
            continue;
        }
        let (ratio, shift_deg) = (row[8], row[9]);
        let kind = if ratio != 0.0 || shift_deg != 0.0 {
            BranchKind::Transformer
        } else {
            BranchKind::AcLine
        };
        let (angmin, angmax) = if row[11] == 0.0 && row[12] == 0.0 {
            (-2.0 * PI, 2.0 * PI)
        } else {
            (row[11].to_radians(), row[12].to_radians())
        };
        branches.push(Branch {
            id: k + 1,
            from_bus,
            to_bus,
            kind,
            br_r: row[2],
            br_x: row[3],
            b_fr: row[4] / 2.0,
            b_to: row[4] / 2.0,
            rate_a: row[5] / base_mva,
            rate_b: row[6] / base_mva,
            rate_c: row[7] / base_mva,
            angmin,
            angmax,
            tap: if kind == BranchKind::Transformer && ratio != 0.0 { ratio } else { 1.0 },
            shift: if kind == BranchKind::Transformer { shift_deg.to_radians() } else { 0.0 },
        });
    }

    Ok(Grid {
        base_mva,
        buses,
        generators,
        loads,
        shunts,
        branches,
    })
}

/// `(c2, c1, c0)` in MW units from a model-2 gencost row.
fn polynomial_cost(row: &[f64], gen: usize) -> Result<(f64, f64, f64)> {
    if row.len() < 4 {
        return Err(Error::MalformedCase(format!("gencost row {gen}: too few columns")));
    }
    if row[0] != 2.0 {
        return Err(Error::UnsupportedCostModel(format!(
            "generator {gen}: cost model {} (only polynomial model 2 is supported)",
            row[0]
        )));
    }
    let n = row[3];
    if n.fract() != 0.0 || n < 0.0 {
        return Err(Error::MalformedCase(format!("gencost row {gen}: bad coefficient count")));
    }
    let n = n as usize;
    if n > 3 {
        return Err(Error::UnsupportedCostModel(format!(
            "generator {gen}: polynomial with {n} coefficients (degree > 2)"
        )));
    }
    if row.len() < 4 + n {
        return Err(Error::MalformedCase(format!("gencost row {gen}: missing coefficients")));
    }
    let coeffs = &row[4..4 + n];
    let mut c = [0.0; 3];
    for (power, &v) in coeffs.iter().rev().enumerate() {
        c[power] = v;
    }
    Ok((c[2], c[1], c[0]))
}
