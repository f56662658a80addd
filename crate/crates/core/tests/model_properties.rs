//! Properties of the model's decoded outputs and of the training schedule.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridopf::constraints::{violation_degrees, Family};
use gridopf::gnn::{forward, lr_at, ModelConfig, ModelParams, TrainConfig};
use gridopf::graph::{to_typed_graph, StandardizationStats};
use gridopf::synthetic::{random_grid, SyntheticOptions};
use gridopf::Grid;

fn grid(seed: u64, min: usize, max: usize) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = SyntheticOptions {
        min_buses: min,
        max_buses: max,
        ..Default::default()
    };
    random_grid(&mut rng, &opts).unwrap()
}

fn scaled_params(seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(ModelConfig::new(8, 2), seed).unwrap();
    p.tensors.values_mut().for_each(|t| t.mapv_inplace(|x| x * scale));
    p
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decoded_outputs_hold_hard_constraints(gseed in 0u64..10_000, pseed in any::<u64>(), scale in 0.01f64..30.0) {
        let g = grid(gseed, 2, 30);
        let graph = to_typed_graph(&g, &StandardizationStats::identity()).unwrap();
        let sol = forward(&scaled_params(pseed, scale), &graph, &g).unwrap();
        let r = violation_degrees(&g, &sol).unwrap();
        prop_assert!(r.ref_angle.degrees.iter().all(|&d| d == 0.0));
        for f in [Family::PgBounds, Family::QgBounds, Family::VmBounds, Family::OhmFromP, Family::OhmFromQ, Family::OhmToP, Family::OhmToQ] {
            prop_assert!(r.max(f).unwrap_or(0.0) <= 1e-12, "{:?}", f);
        }
    }

    #[test]
    fn relabeling_elements_permutes_outputs(gseed in 0u64..10_000, pseed in any::<u64>(), shuffle in any::<u64>()) {
        let g = grid(gseed, 10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        let pb = permutation(g.buses.len(), &mut rng);
        let pg = permutation(g.generators.len(), &mut rng);
        let pl = permutation(g.loads.len(), &mut rng);
        let pe = permutation(g.branches.len(), &mut rng);
        let mut h = g.clone();
        h.buses = pb.iter().map(|&i| g.buses[i].clone()).collect();
        h.generators = pg.iter().map(|&i| g.generators[i].clone()).collect();
        h.loads = pl.iter().map(|&i| g.loads[i].clone()).collect();
        h.branches = pe.iter().map(|&i| g.branches[i].clone()).collect();

        let params = scaled_params(pseed, 1.0);
        let stats = StandardizationStats::identity();
        let a = forward(&params, &to_typed_graph(&g, &stats).unwrap(), &g).unwrap();
        let b = forward(&params, &to_typed_graph(&h, &stats).unwrap(), &h).unwrap();
        for (j, &i) in pb.iter().enumerate() {
            prop_assert!(close(a.va[i], b.va[j]) && close(a.vm[i], b.vm[j]));
        }
        for (j, &k) in pg.iter().enumerate() {
            prop_assert!(close(a.pg[k], b.pg[j]) && close(a.qg[k], b.qg[j]));
        }
        for (j, &k) in pe.iter().enumerate() {
            prop_assert!(close(a.pf[k], b.pf[j]) && close(a.qt[k], b.qt[j]));
        }
    }

    #[test]
    fn schedule_rises_then_falls(a in 0u64..200_000, b in 0u64..200_000) {
        let cfg = TrainConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        if hi <= cfg.warmup_steps {
            prop_assert!(lr_at(lo, &cfg) <= lr_at(hi, &cfg));
        } else if lo >= cfg.warmup_steps {
            prop_assert!(lr_at(lo, &cfg) >= lr_at(hi, &cfg));
        }
        prop_assert!(lr_at(hi, &cfg) <= cfg.peak_lr);
        if hi > cfg.warmup_steps {
            prop_assert!(lr_at(hi, &cfg) >= cfg.final_lr);
        }
    }
}
