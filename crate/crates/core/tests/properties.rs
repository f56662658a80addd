//! Property tests over random grids, cases and solutions.

use std::collections::HashMap;
use std::fmt::Write as _;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridopf::acpf::{restore, solve_pf, PfOptions};
use gridopf::baselines::solve_dcopf;
use gridopf::case_io::{parse_case, ComponentKind};
use gridopf::cases;
use gridopf::constraints::{violation_degrees, Family};
use gridopf::datagen::{generate_example, DatagenConfig, DatasetKind};
use gridopf::graph::{to_typed_graph, EdgeType, NodeType, StandardizationStats};
use gridopf::grid::{branch_pi_params, is_connected};
use gridopf::synthetic::{random_grid, SyntheticOptions};
use gridopf::{BranchKind, BusType, Grid, OpfSolution};

fn grid_from_seed(seed: u64, max_buses: usize) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_grid(
        &mut rng,
        &SyntheticOptions {
            max_buses,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Reachability by repeated relaxation over all pairs.
fn connected_oracle(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        reach[i][i] = true;
    }
    for &(a, b) in edges {
        reach[a][b] = true;
        reach[b][a] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    reach[0].iter().all(|&r| r)
}

fn random_voltages(grid: &Grid, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.buses.len();
    let va = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let vm = (0..n).map(|_| rng.random_range(0.85..1.15)).collect();
    (va, vm)
}

fn random_solution(grid: &Grid, seed: u64) -> OpfSolution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (va, vm) = random_voltages(grid, seed);
    let mut s = OpfSolution::zeros(grid);
    s.va = va;
    s.vm = vm;
    s.pg = grid.generators.iter().map(|_| rng.random_range(-1.0..3.0)).collect();
    s.qg = grid.generators.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    s.with_derived_flows(grid).unwrap()
}

/// Net injection mismatch from a bus admittance matrix assembled here.
fn ybus_balance_oracle(grid: &Grid, s: &OpfSolution) -> Vec<Complex64> {
    let n = grid.buses.len();
    let pos: HashMap<usize, usize> = grid.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for br in &grid.branches {
        let p = branch_pi_params(br).unwrap();
        let (f, t) = (pos[&br.from_bus], pos[&br.to_bus]);
        let tt = p.t;
        y[f][f] += (p.y + p.yc_fr) / (tt * tt.conj());
        y[t][t] += p.y + p.yc_to;
        y[f][t] -= p.y / tt.conj();
        y[t][f] -= p.y / tt;
    }
    for sh in &grid.shunts {
        y[pos[&sh.bus]][pos[&sh.bus]] += Complex64::new(sh.gs, sh.bs);
    }
    let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(s.vm[i], s.va[i])).collect();
    let mut inj = vec![Complex64::new(0.0, 0.0); n];
    for (k, g) in grid.generators.iter().enumerate() {
        inj[pos[&g.bus]] += Complex64::new(s.pg[k], s.qg[k]);
    }
    for l in &grid.loads {
        inj[pos[&l.bus]] -= Complex64::new(l.pd, l.qd);
    }
    (0..n)
        .map(|i| {
            let iy: Complex64 = (0..n).map(|j| y[i][j] * v[j]).sum();
            inj[i] - v[i] * iy.conj()
        })
        .collect()
}

/// MATPOWER text for a grid with raw MW values, written independently of
/// the parser.
fn matpower_text(grid: &Grid, base: f64, cost: &[(f64, f64, f64)]) -> String {
    let mut s = String::from("function mpc = generated\nmpc.version = '2';\n");
    let _ = writeln!(s, "mpc.baseMVA = {base};\nmpc.bus = [");
    for b in &grid.buses {
        let code = match b.bus_type {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Ref => 3,
            BusType::Inactive => 4,
        };
        let (pd, qd) = grid
            .loads
            .iter()
            .filter(|l| l.bus == b.id)
            .fold((0.0, 0.0), |a, l| (a.0 + l.pd * base, a.1 + l.qd * base));
        let (gs, bs) = grid
            .shunts
            .iter()
            .filter(|x| x.bus == b.id)
            .fold((0.0, 0.0), |a, x| (a.0 + x.gs * base, a.1 + x.bs * base));
        let _ = writeln!(
            s,
            "\t{}\t{code}\t{pd:?}\t{qd:?}\t{gs:?}\t{bs:?}\t1\t1\t0\t{:?}\t1\t{:?}\t{:?};",
            b.id, b.base_kv, b.vmax, b.vmin
        );
    }
    s += "];\nmpc.gen = [\n";
    for g in &grid.generators {
        let _ = writeln!(
            s,
            "\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t1\t{:?}\t{:?};",
            g.bus,
            g.pg * base,
            g.qg * base,
            g.qmax * base,
            g.qmin * base,
            g.vg,
            g.mbase,
            g.pmax * base,
            g.pmin * base
        );
    }
    s += "];\nmpc.branch = [\n";
    for br in &grid.branches {
        let ratio = if br.kind == BranchKind::Transformer { br.tap } else { 0.0 };
        let _ = writeln!(
            s,
            "\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t0\t0\t{ratio:?}\t{:?}\t1\t{:?}\t{:?};",
            br.from_bus,
            br.to_bus,
            br.br_r,
            br.br_x,
            br.b_fr + br.b_to,
            br.rate_a * base,
            br.shift.to_degrees(),
            br.angmin.to_degrees(),
            br.angmax.to_degrees()
        );
    }
    s += "];\nmpc.gencost = [\n";
    for (c2, c1, c0) in cost {
        let _ = writeln!(s, "\t2\t0\t0\t3\t{c2:?}\t{c1:?}\t{c0:?};");
    }
    s += "];\n";
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn connectivity_matches_reachability_oracle(n in 2usize..=20, raw in prop::collection::vec((0usize..20, 0usize..20), 0..30)) {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let opts = SyntheticOptions { min_buses: 20, max_buses: 20, ..Default::default() };
        let mut grid = random_grid(&mut rng, &opts).unwrap();
        grid.buses.truncate(n);
        for (i, b) in grid.buses.iter_mut().enumerate() {
            b.id = i + 1;
            b.bus_type = if i == 0 { BusType::Ref } else { BusType::Pq };
        }
        grid.generators.retain(|g| g.bus == 1);
        grid.loads.clear();
        grid.shunts.clear();
        let template = grid.branches[0].clone();
        let edges: Vec<(usize, usize)> = raw.into_iter().map(|(a, b)| (a % n, b % n)).filter(|(a, b)| a != b).collect();
        grid.branches = edges
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| {
                let mut br = template.clone();
                br.id = k + 1;
                br.from_bus = a + 1;
                br.to_bus = b + 1;
                br
            })
            .collect();
        prop_assert_eq!(is_connected(&grid), connected_oracle(n, &edges));
    }

    #[test]
    fn pi_admittance_inverts_impedance(r in 0.0f64..0.5, x in prop_oneof![-0.5f64..-1e-3, 1e-3f64..0.5]) {
        let grid = parse_case(cases::CASE9).unwrap();
        let mut br = grid.branches[0].clone();
        br.br_r = r;
        br.br_x = x;
        let p = branch_pi_params(&br).unwrap();
        let one = p.y * Complex64::new(r, x);
        prop_assert!((one - 1.0).norm() <= 1e-14);
    }

    #[test]
    fn typed_graph_readback_recovers_standardized_features(seed in 0u64..1000) {
        let grid = grid_from_seed(seed, 20);
        let others: Vec<Grid> = (1..4).map(|k| grid_from_seed(seed + 7919 * k, 20)).collect();
        let stats = StandardizationStats::fit(others.iter().map(|g| (g, None)));
        let tg = to_typed_graph(&grid, &stats).unwrap();
        let std = |t: NodeType, c: usize, raw: f64| (raw - stats.nodes[t.index()].mean[c]) / stats.nodes[t.index()].std[c];
        for (row, &i) in tg.node_elements[NodeType::Bus.index()].iter().enumerate() {
            let b = &grid.buses[i];
            let mut one_hot = [0.0; 4];
            one_hot[b.bus_type.one_hot_index()] = 1.0;
            let raw = [b.base_kv, one_hot[0], one_hot[1], one_hot[2], one_hot[3], b.vmin, b.vmax];
            for (c, v) in raw.iter().enumerate() {
                prop_assert_eq!(tg.node_feature(NodeType::Bus, row, c), std(NodeType::Bus, c, *v));
            }
        }
        for (row, &k) in tg.node_elements[NodeType::Generator.index()].iter().enumerate() {
            let g = &grid.generators[k];
            let raw = [g.mbase, g.pg, g.pmin, g.pmax, g.qg, g.qmin, g.qmax, g.vg, g.cost_squared, g.cost_linear, g.cost_offset];
            for (c, v) in raw.iter().enumerate() {
                prop_assert_eq!(tg.node_feature(NodeType::Generator, row, c), std(NodeType::Generator, c, *v));
            }
        }
        for (row, &k) in tg.node_elements[NodeType::Load.index()].iter().enumerate() {
            let l = &grid.loads[k];
            prop_assert_eq!(tg.node_feature(NodeType::Load, row, 0), std(NodeType::Load, 0, l.pd));
            prop_assert_eq!(tg.node_feature(NodeType::Load, row, 1), std(NodeType::Load, 1, l.qd));
        }
        for et in [EdgeType::AcLine, EdgeType::Transformer] {
            let m = &stats.edges[et.index()];
            for (row, &k) in tg.edge_elements[et.index()].iter().enumerate() {
                let br = &grid.branches[k];
                let mut raw = vec![br.angmin, br.angmax, br.b_fr, br.b_to, br.br_r, br.br_x, br.rate_a, br.rate_b, br.rate_c];
                if et == EdgeType::Transformer {
                    raw.extend([br.tap, br.shift]);
                }
                for (c, v) in raw.iter().enumerate() {
                    prop_assert_eq!(tg.edge_feature(et, row, c), (v - m.mean[c]) / m.std[c]);
                }
            }
        }
    }

    #[test]
    fn parser_reads_every_generated_case(seed in 0u64..1000, base in prop_oneof![Just(100.0), Just(1000.0), 1.0f64..500.0]) {
        let grid = grid_from_seed(seed, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<(f64, f64, f64)> = grid.generators.iter().map(|_| (rng.random_range(0.0..0.1), rng.random_range(0.0..50.0), rng.random_range(0.0..100.0))).collect();
        let text = matpower_text(&grid, base, &cost);
        let parsed = parse_case(&text).unwrap();
        prop_assert_eq!(parsed.buses.len(), grid.buses.len());
        prop_assert_eq!(parsed.generators.len(), grid.generators.len());
        prop_assert_eq!(parsed.branches.len(), grid.branches.len());
        prop_assert!(parsed.validate().is_ok());
        // Per-unit conversion against the raw MW columns.
        let raw_pd: HashMap<usize, f64> = grid.loads.iter().map(|l| (l.bus, l.pd * base)).collect();
        for l in &parsed.loads {
            prop_assert!((l.pd * base - raw_pd[&l.bus]).abs() <= 1e-12 * raw_pd[&l.bus].abs().max(1.0));
        }
        for (k, g) in parsed.generators.iter().enumerate() {
            prop_assert!((g.pmax * base - grid.generators[k].pmax * base).abs() <= 1e-12 * base.max(1.0) * g.pmax.abs().max(1.0));
            let (c2, c1, c0) = cost[k];
            let p_mw = 0.7 * grid.generators[k].pmax * base;
            let mw_cost = c2 * p_mw * p_mw + c1 * p_mw;
            let pu = p_mw / base;
            let pu_cost = g.cost_squared * pu * pu + g.cost_linear * pu;
            prop_assert!((mw_cost - pu_cost).abs() <= 1e-9 * mw_cost.abs().max(1.0));
            prop_assert_eq!(g.cost_offset, c0);
        }
    }

    #[test]
    fn topdrop_examples_are_connected_and_deterministic(seed in 0u64..10_000, index in 0usize..500) {
        let base = parse_case(cases::CASE30).unwrap();
        let cfg = DatagenConfig::new("case30", 500, DatasetKind::TopDrop, seed);
        let a = generate_example(&cfg, &base, index).unwrap();
        prop_assert!(is_connected(&a.grid));
        if let Some(d) = &a.meta.dropped {
            if d.kind == ComponentKind::Generator {
                let g = base.generators.iter().find(|g| g.id == d.id).unwrap();
                let bus = base.buses.iter().find(|b| b.id == g.bus).unwrap();
                prop_assert_ne!(bus.bus_type, BusType::Ref);
            }
        }
        let b = generate_example(&cfg, &base, index).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn derived_flows_satisfy_branch_equations(seed in 0u64..1000) {
        let grid = grid_from_seed(seed, 30);
        let s = random_solution(&grid, seed);
        let r = violation_degrees(&grid, &s).unwrap();
        for f in [Family::OhmFromP, Family::OhmFromQ, Family::OhmToP, Family::OhmToQ] {
            prop_assert!(r.max(f).unwrap_or(0.0) <= 1e-12);
        }
    }

    #[test]
    fn flow_balance_matches_ybus_oracle(seed in 0u64..1000) {
        let grid = grid_from_seed(seed, 20);
        let s = random_solution(&grid, seed);
        let r = violation_degrees(&grid, &s).unwrap();
        let oracle = ybus_balance_oracle(&grid, &s);
        for (&i, &d) in r.p_balance.entities.iter().zip(&r.p_balance.degrees) {
            prop_assert!((d - oracle[i].re.abs()).abs() <= 1e-10, "bus {i}: {d} vs {}", oracle[i].re);
        }
        for (&i, &d) in r.q_balance.entities.iter().zip(&r.q_balance.degrees) {
            prop_assert!((d - oracle[i].im.abs()).abs() <= 1e-10);
        }
    }

    #[test]
    fn degrees_are_invariant_to_element_order(seed in 0u64..1000, shuffle in any::<u64>()) {
        let grid = grid_from_seed(seed, 20);
        let s = random_solution(&grid, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        let perm = |n: usize, rng: &mut ChaCha8Rng| {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            p
        };
        let pb = perm(grid.buses.len(), &mut rng);
        let pg = perm(grid.generators.len(), &mut rng);
        let pe = perm(grid.branches.len(), &mut rng);
        let mut g2 = grid.clone();
        g2.buses = pb.iter().map(|&i| grid.buses[i].clone()).collect();
        g2.generators = pg.iter().map(|&i| grid.generators[i].clone()).collect();
        g2.branches = pe.iter().map(|&i| grid.branches[i].clone()).collect();
        let mut s2 = OpfSolution::zeros(&g2);
        s2.va = pb.iter().map(|&i| s.va[i]).collect();
        s2.vm = pb.iter().map(|&i| s.vm[i]).collect();
        s2.pg = pg.iter().map(|&i| s.pg[i]).collect();
        s2.qg = pg.iter().map(|&i| s.qg[i]).collect();
        let s2 = s2.with_derived_flows(&g2).unwrap();
        let (r1, r2) = (violation_degrees(&grid, &s).unwrap(), violation_degrees(&g2, &s2).unwrap());
        for ((f, d1), (_, d2)) in r1.iter().zip(r2.iter()) {
            let p: &[usize] = match f {
                Family::RefAngle | Family::VmBounds | Family::PBalance | Family::QBalance => &pb,
                Family::PgBounds | Family::QgBounds => &pg,
                _ => &pe,
            };
            let by_entity: HashMap<usize, f64> = d1.entities.iter().copied().zip(d1.degrees.iter().copied()).collect();
            prop_assert_eq!(d1.len(), d2.len(), "{:?}", f);
            for (&e2, &v2) in d2.entities.iter().zip(&d2.degrees) {
                let v1 = by_entity[&p[e2]];
                prop_assert!((v1 - v2).abs() <= 1e-12 * v1.abs().max(1.0), "{:?}: {} vs {}", f, v1, v2);
            }
        }
    }

    #[test]
    fn thermal_degree_grows_with_apparent_power(seed in 0u64..1000, k in 1.0f64..3.0) {
        let grid = grid_from_seed(seed, 20);
        let s = random_solution(&grid, seed);
        let mut scaled = s.clone();
        for v in [&mut scaled.pf, &mut scaled.qf, &mut scaled.pt, &mut scaled.qt] {
            v.iter_mut().for_each(|x| *x *= k);
        }
        let (a, b) = (violation_degrees(&grid, &s).unwrap(), violation_degrees(&grid, &scaled).unwrap());
        for (x, y) in a.thermal_from.degrees.iter().zip(&b.thermal_from.degrees) {
            prop_assert!(y >= x);
        }
        for (x, y) in a.thermal_to.degrees.iter().zip(&b.thermal_to.degrees) {
            prop_assert!(y >= x);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn power_flow_holds_dispatch_and_reactive_limits(seed in 0u64..1000) {
        let base = parse_case(cases::CASE14).unwrap();
        let cfg = DatagenConfig::new("case14", 1000, DatasetKind::FullTop, seed);
        let ex = generate_example(&cfg, &base, 0).unwrap();
        let r = solve_pf(&ex.grid, None, &PfOptions::default()).unwrap();
        prop_assert!(r.converged);
        let topo = ex.grid.topology().unwrap();
        for (k, g) in ex.grid.generators.iter().enumerate() {
            if topo.ref_buses.contains(&topo.gen_bus[k]) {
                continue;
            }
            prop_assert_eq!(r.solution.pg[k].to_bits(), g.pg.to_bits());
            prop_assert!(g.qmin <= r.solution.qg[k] && r.solution.qg[k] <= g.qmax);
        }
        let again = restore(&ex.grid, &r.solution).unwrap();
        prop_assert!(again.converged);
    }

    #[test]
    fn dc_dispatch_ignores_uniform_linear_cost_shift(shift in -5.0f64..5.0) {
        let grid = parse_case(cases::CASE9).unwrap();
        let a = solve_dcopf(&grid).unwrap();
        let interior = grid.generators.iter().zip(&a.pg).all(|(g, p)| p - g.pmin > 1e-3 && g.pmax - p > 1e-3);
        prop_assume!(interior);
        let mut shifted = grid.clone();
        shifted.generators.iter_mut().for_each(|g| g.cost_linear += shift);
        let b = solve_dcopf(&shifted).unwrap();
        for (x, y) in a.pg.iter().zip(&b.pg) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        let total: f64 = a.pg.iter().sum();
        prop_assert!((b.objective - a.objective - shift * total).abs() <= 1e-6 * a.objective.abs().max(1.0));
    }

    #[test]
    fn dc_flows_follow_angles_and_balance(seed in 0u64..1000) {
        let base = parse_case(cases::CASE14).unwrap();
        let cfg = DatagenConfig::new("case14", 1000, DatasetKind::FullTop, seed);
        let ex = generate_example(&cfg, &base, 0).unwrap();
        let dc = solve_dcopf(&ex.grid).unwrap();
        let pos: HashMap<usize, usize> = ex.grid.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut net = vec![0.0; ex.grid.buses.len()];
        for (k, br) in ex.grid.branches.iter().enumerate() {
            let (f, t) = (pos[&br.from_bus], pos[&br.to_bus]);
            let b = 1.0 / (br.br_x * br.tap);
            let p = b * (dc.va[f] - dc.va[t] - br.shift);
            prop_assert!((p - dc.pf[k]).abs() <= 1e-9, "branch {k}: {p} vs {}", dc.pf[k]);
            // The receiving end sees exactly the negated flow.
            let to_end = -dc.pf[k];
            prop_assert_eq!(dc.pf[k] + to_end, 0.0);
            net[f] -= dc.pf[k];
            net[t] -= to_end;
        }
        for (k, g) in ex.grid.generators.iter().enumerate() {
            net[pos[&g.bus]] += dc.pg[k];
        }
        for l in &ex.grid.loads {
            net[pos[&l.bus]] -= l.pd;
        }
        for s in &ex.grid.shunts {
            net[pos[&s.bus]] -= s.gs;
        }
        for r in net {
            prop_assert!(r.abs() <= 1e-6);
        }
    }
}
