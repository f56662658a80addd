//! Random connected grids for property tests and stress checks.

use rand::Rng;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{Branch, BranchKind, Bus, BusType, Generator, Grid, Load, Shunt};

#[derive(Debug, Clone, Copy)]
pub struct SyntheticOptions {
    pub min_buses: usize,
    pub max_buses: usize,
    /// Extra branches beyond the spanning tree, as a fraction of the bus count.
    pub extra_branch_ratio: f64,
    pub transformer_share: f64,
    pub generator_share: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            min_buses: 2,
            max_buses: 30,
            extra_branch_ratio: 0.4,
            transformer_share: 0.15,
            generator_share: 0.3,
        }
    }
}

fn generator(id: usize, bus: usize, rng: &mut impl Rng) -> Generator {
    let pmax = rng.random_range(0.5..3.0);
    Generator {
        id,
        bus,
        mbase: 100.0,
        pg: 0.5 * pmax,
        pmin: 0.0,
        pmax,
        qg: 0.0,
        qmin: -rng.random_range(0.2..1.0),
        qmax: rng.random_range(0.2..1.0),
        vg: 1.0,
        cost_squared: rng.random_range(0.0..50.0),
        cost_linear: rng.random_range(5.0..40.0),
        cost_offset: 0.0,
    }
}

/// A connected grid with one REF bus, a random spanning tree plus extra
/// branches, and a mix of lines and transformers.
pub fn random_grid(rng: &mut impl Rng, opts: &SyntheticOptions) -> Result<Grid> {
    if opts.min_buses < 2 || opts.min_buses > opts.max_buses {
        return Err(Error::InvalidArgument(format!(
            "bus range {}..={} must start at 2 or more",
            opts.min_buses, opts.max_buses
        )));
    }
    let n = rng.random_range(opts.min_buses..=opts.max_buses);
    let mut buses: Vec<Bus> = (0..n)
        .map(|i| Bus {
            id: i + 1,
            base_kv: 100.0,
            bus_type: BusType::Pq,
            vmin: rng.random_range(0.9..0.95),
            vmax: rng.random_range(1.05..1.1),
        })
        .collect();
    buses[0].bus_type = BusType::Ref;

    let mut pairs = Vec::new();
    for i in 1..n {
        pairs.push((rng.random_range(0..i), i));
    }
    let extra = (opts.extra_branch_ratio * n as f64).round() as usize;
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    let branches = pairs
        .into_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let transformer = rng.random_bool(opts.transformer_share);
            let (from, to) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
            let angle = rng.random_range(PI / 6.0..PI / 2.0);
            let charging = if transformer { 0.0 } else { rng.random_range(0.0..0.05) };
            Branch {
                id: k + 1,
                from_bus: from + 1,
                to_bus: to + 1,
                kind: if transformer { BranchKind::Transformer } else { BranchKind::AcLine },
                br_r: rng.random_range(0.001..0.05),
                br_x: rng.random_range(0.02..0.3),
                b_fr: charging / 2.0,
                b_to: charging / 2.0,
                rate_a: if rng.random_bool(0.8) { rng.random_range(1.0..5.0) } else { 0.0 },
                rate_b: 0.0,
                rate_c: 0.0,
                angmin: -angle,
                angmax: angle,
                tap: if transformer { rng.random_range(0.95..1.05) } else { 1.0 },
                shift: if transformer && rng.random_bool(0.3) { rng.random_range(-0.1..0.1) } else { 0.0 },
            }
        })
        .collect();

    let mut generators = vec![generator(1, 1, rng)];
    for i in 1..n {
        if rng.random_bool(opts.generator_share) {
            buses[i].bus_type = BusType::Pv;
            generators.push(generator(generators.len() + 1, i + 1, rng));
        }
    }
    let mut loads = Vec::new();
    for i in 1..n {
        if rng.random_bool(0.7) {
            loads.push(Load {
                id: loads.len() + 1,
                bus: i + 1,
                pd: rng.random_range(0.0..0.5),
                qd: rng.random_range(-0.05..0.2),
            });
        }
    }
    let mut shunts = Vec::new();
    for i in 0..n {
        if rng.random_bool(0.1) {
            shunts.push(Shunt {
                id: shunts.len() + 1,
                bus: i + 1,
                gs: 0.0,
                bs: rng.random_range(-0.1..0.2),
            });
        }
    }

    let grid = Grid {
        base_mva: 100.0,
        buses,
        generators,
        loads,
        shunts,
        branches,
    };
    grid.validate()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::is_connected;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grids_are_valid_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = random_grid(&mut rng, &SyntheticOptions::default()).unwrap();
            assert!(g.buses.len() <= 30 && is_connected(&g));
            assert_eq!(g.buses.iter().filter(|b| b.bus_type == BusType::Ref).count(), 1);
        }
    }

    #[test]
    fn rejects_single_bus_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = SyntheticOptions {
            min_buses: 1,
            ..Default::default()
        };
        assert!(random_grid(&mut rng, &opts).is_err());
    }
}
