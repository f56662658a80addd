//! FullTop and TopDrop dataset generation.
//!
//! Every example starts from the base grid. Each load is scaled by
//! independent uniform factors in `[1 - f, 1 + f]` for `pd` and `qd`. TopDrop
//! examples additionally flip a coin and, on success, remove one generator
//! (never one at a REF bus) or one branch whose removal keeps the grid
//! connected.
//!
//! Example `i` draws from its own generator seeded by [`example_seed`], so
//! output does not depend on scheduling or on the other examples.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case_io::{read_examples, write_examples, ComponentKind, Dropped, Example, ExampleMeta, Perturbation};
use crate::error::{Error, Result};
use crate::grid::{is_connected, BusType, Grid, OpfSolution};

/// Maximum number of branch resamples before giving up.
pub const MAX_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "FULLTOP")]
    FullTop,
    #[serde(rename = "TOPDROP")]
    TopDrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    /// Name recorded in every example's metadata.
    pub base_case: String,
    pub n_examples: usize,
    pub dataset_kind: DatasetKind,
    pub load_perturbation_fraction: f64,
    pub drop_probability: f64,
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
    /// Abort when more than this fraction of examples fails to label.
    pub max_label_failure_rate: f64,
}

impl DatagenConfig {
    pub fn new(base_case: impl Into<String>, n_examples: usize, dataset_kind: DatasetKind, seed: u64) -> Self {
        DatagenConfig {
            base_case: base_case.into(),
            n_examples,
            dataset_kind,
            load_perturbation_fraction: 0.2,
            drop_probability: 0.5,
            split_fractions: (0.90, 0.05, 0.05),
            seed,
            max_label_failure_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split_fractions;
        let ok = (a + b + c - 1.0).abs() < 1e-9
            && a >= 0.0
            && b >= 0.0
            && c >= 0.0
            && (0.0..=1.0).contains(&self.drop_probability)
            && (0.0..1.0).contains(&self.load_perturbation_fraction)
            && (0.0..=1.0).contains(&self.max_label_failure_rate);
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid datagen config {self:?}")));
        }
        Ok(())
    }
}

/// Seed of example `index`'s private generator (SplitMix64 finalizer).
pub fn example_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scale every load's `pd` and `qd` by independent factors drawn uniformly
/// from `[1 - fraction, 1 + fraction]`.
pub fn perturb_loads<R: Rng + ?Sized>(grid: &Grid, fraction: f64, rng: &mut R) -> Grid {
    let mut out = grid.clone();
    for load in &mut out.loads {
        let up: f64 = rng.random_range(-fraction..=fraction);
        let uq: f64 = rng.random_range(-fraction..=fraction);
        load.pd *= 1.0 + up;
        load.qd *= 1.0 + uq;
    }
    out
}

fn eligible_generators(grid: &Grid) -> Vec<usize> {
    let ref_ids: Vec<usize> = grid
        .buses
        .iter()
        .filter(|b| b.bus_type == BusType::Ref)
        .map(|b| b.id)
        .collect();
    (0..grid.generators.len())
        .filter(|&k| !ref_ids.contains(&grid.generators[k].bus))
        .collect()
}

fn without_branch(grid: &Grid, k: usize) -> Grid {
    let mut g = grid.clone();
    g.branches.remove(k);
    g
}

fn has_droppable_branch(grid: &Grid) -> bool {
    (0..grid.branches.len()).any(|k| is_connected(&without_branch(grid, k)))
}

/// Remove one generator or branch.
///
/// A fair coin picks the kind. Generators are drawn uniformly among those
/// not at a REF bus; when none exists the branch path is taken instead and
/// the fallback is recorded. Branches are drawn uniformly and redrawn while
/// their removal would disconnect the grid.
pub fn drop_component<R: Rng + ?Sized>(grid: &Grid, rng: &mut R) -> Result<(Grid, Dropped)> {
    if !is_connected(grid) {
        return Err(Error::InvalidGrid("cannot drop from a disconnected grid".into()));
    }
    let gens = eligible_generators(grid);
    let want_gen = rng.random_bool(0.5);
    let branch_ok = has_droppable_branch(grid);
    let take_gen = match (want_gen, gens.is_empty(), branch_ok) {
        (true, false, _) => true,
        (true, true, true) => false,
        (false, _, true) => false,
        (false, false, false) => true,
        (_, true, false) => {
            return Err(Error::NoEligibleComponent(
                "no generator outside REF buses and every branch is a bridge".into(),
            ))
        }
    };
    if take_gen {
        let k = gens[rng.random_range(0..gens.len())];
        let mut g = grid.clone();
        let removed = g.generators.remove(k);
        return Ok((
            g,
            Dropped {
                kind: ComponentKind::Generator,
                id: removed.id,
                fallback: !want_gen,
            },
        ));
    }
    for _ in 0..MAX_RESAMPLES {
        let k = rng.random_range(0..grid.branches.len());
        let g = without_branch(grid, k);
        if is_connected(&g) {
            return Ok((
                g,
                Dropped {
                    kind: ComponentKind::Branch,
                    id: grid.branches[k].id,
                    fallback: want_gen,
                },
            ));
        }
    }
    Err(Error::NoEligibleComponent(format!(
        "no connected branch removal after {MAX_RESAMPLES} draws"
    )))
}

/// Build the unlabeled example `index`.
pub fn generate_example(config: &DatagenConfig, base: &Grid, index: usize) -> Result<Example> {
    let seed = example_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = perturb_loads(base, config.load_perturbation_fraction, &mut rng);
    let mut perturbation = Perturbation::LoadOnly;
    let mut dropped = None;
    if config.dataset_kind == DatasetKind::TopDrop && rng.random_bool(config.drop_probability) {
        let (g, d) = drop_component(&grid, &mut rng)?;
        grid = g;
        dropped = Some(d);
        perturbation = Perturbation::LoadAndDrop;
    }
    Ok(Example {
        grid,
        solution: None,
        meta: ExampleMeta {
            source_case: config.base_case.clone(),
            perturbation,
            dropped,
            seed,
        },
    })
}

/// Something that turns a grid into a reference solution.
pub type Labeler<'a> = &'a (dyn Fn(&Grid) -> Result<OpfSolution> + Sync);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatagenConfig,
    pub examples: Vec<Example>,
    pub failures: Vec<LabelFailure>,
    /// Positions into `examples`.
    pub splits: Splits,
}

impl Dataset {
    pub fn split(&self, which: &[usize]) -> Vec<Example> {
        which.iter().map(|&i| self.examples[i].clone()).collect()
    }
}

/// Shuffle `0..n` with `seed` and cut it by `fractions`.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = ((fractions.1 * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Splits {
        train: idx,
        validation,
        test,
    }
}

/// Label examples in parallel. Failures are dropped from the returned list
/// and reported separately; too many failures is an error.
pub fn label_examples(examples: Vec<Example>, labeler: Labeler, max_failure_rate: f64) -> Result<(Vec<Example>, Vec<LabelFailure>)> {
    let total = examples.len();
    let results: Vec<std::result::Result<Example, LabelFailure>> = examples
        .into_par_iter()
        .enumerate()
        .map(|(index, mut ex)| match labeler(&ex.grid) {
            Ok(sol) => {
                ex.solution = Some(sol);
                Ok(ex)
            }
            Err(e) => Err(LabelFailure {
                index,
                message: e.to_string(),
            }),
        })
        .collect();
    let mut kept = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(ex) => kept.push(ex),
            Err(f) => failures.push(f),
        }
    }
    if total > 0 {
        let rate = failures.len() as f64 / total as f64;
        if rate > max_failure_rate {
            return Err(Error::LabelerFailureRate {
                rate,
                cap: max_failure_rate,
                failed: failures.len(),
                total,
            });
        }
    }
    Ok((kept, failures))
}

/// Generate, optionally label, and split a dataset.
pub fn generate_dataset(config: &DatagenConfig, base: &Grid, labeler: Option<Labeler>) -> Result<Dataset> {
    config.validate()?;
    base.validate()?;
    if !is_connected(base) {
        return Err(Error::InvalidGrid("base case is not connected".into()));
    }
    let examples = (0..config.n_examples)
        .into_par_iter()
        .map(|i| generate_example(config, base, i))
        .collect::<Result<Vec<_>>>()?;
    let (examples, failures) = match labeler {
        Some(l) => label_examples(examples, l, config.max_label_failure_rate)?,
        None => (examples, Vec::new()),
    };
    let splits = split_indices(examples.len(), config.split_fractions, config.seed);
    Ok(Dataset {
        config: config.clone(),
        examples,
        failures,
        splits,
    })
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatagenConfig,
    pub counts: (usize, usize, usize),
    pub labeled: bool,
    pub failures: Vec<LabelFailure>,
}

/// Write the three split files and a manifest into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = &dataset.splits;
    write_examples(&dir.join(TRAIN_FILE), &dataset.split(&s.train))?;
    write_examples(&dir.join(VALIDATION_FILE), &dataset.split(&s.validation))?;
    write_examples(&dir.join(TEST_FILE), &dataset.split(&s.test))?;
    let manifest = Manifest {
        config: dataset.config.clone(),
        counts: (s.train.len(), s.validation.len(), s.test.len()),
        labeled: dataset.examples.iter().all(|e| e.solution.is_some()),
        failures: dataset.failures.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// The three splits stored in `dir`.
pub struct SplitFiles {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn read_dataset(dir: &Path) -> Result<SplitFiles> {
    let read = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            read_examples(&p)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(SplitFiles {
        train: read(TRAIN_FILE)?,
        validation: read(VALIDATION_FILE)?,
        test: read(TEST_FILE)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_case;
    use crate::cases;

    struct AllOnes;

    impl rand::RngCore for AllOnes {
        fn next_u32(&mut self) -> u32 {
            u32::MAX
        }
        fn next_u64(&mut self) -> u64 {
            u64::MAX
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0xff);
        }
    }

    fn chain3(ref_gen_only: bool) -> Grid {
        let mut g = parse_case(cases::CASE9).unwrap();
        g.buses.truncate(3);
        for (i, b) in g.buses.iter_mut().enumerate() {
            b.bus_type = if i == 0 { BusType::Ref } else { BusType::Pq };
        }
        let mut br = g.branches[0].clone();
        g.branches.clear();
        for (k, (f, t)) in [(1, 2), (2, 3)].into_iter().enumerate() {
            br.id = k + 1;
            br.from_bus = f;
            br.to_bus = t;
            g.branches.push(br.clone());
        }
        g.loads.clear();
        g.shunts.clear();
        g.generators.truncate(if ref_gen_only { 1 } else { 2 });
        if !ref_gen_only {
            g.buses[1].bus_type = BusType::Pv;
        }
        g
    }

    #[test]
    fn zero_draws_leave_loads_unchanged() {
        let grid = parse_case(cases::CASE14).unwrap();
        let out = perturb_loads(&grid, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out, grid);
    }

    #[test]
    fn upper_draw_hits_the_boundary() {
        let mut grid = parse_case(cases::CASE9).unwrap();
        grid.loads.truncate(1);
        grid.loads[0].pd = 1.0;
        // The all-ones stream maps to the top of the inclusive range.
        let out = perturb_loads(&grid, 0.2, &mut AllOnes);
        assert!((out.loads[0].pd - 1.2).abs() < 1e-12);
    }

    #[test]
    fn chain_forces_generator_drop() {
        let grid = chain3(false);
        for s in 0..20 {
            let (g, d) = drop_component(&grid, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert_eq!(d.kind, ComponentKind::Generator);
            assert_eq!(g.branches.len(), 2);
        }
        assert!(matches!(
            drop_component(&chain3(true), &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::NoEligibleComponent(_))
        ));
    }

    #[test]
    fn ref_only_generators_fall_back_to_branches() {
        let mut grid = parse_case(cases::CASE9).unwrap();
        grid.generators.truncate(1);
        let mut fallbacks = 0;
        for s in 0..40 {
            let (g, d) = drop_component(&grid, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert_eq!(d.kind, ComponentKind::Branch);
            assert!(is_connected(&g));
            fallbacks += d.fallback as usize;
        }
        assert!(fallbacks > 0);
    }

    #[test]
    fn fulltop_split_sizes() {
        let base = parse_case(cases::CASE14).unwrap();
        let cfg = DatagenConfig::new("case14", 100, DatasetKind::FullTop, 4);
        let ds = generate_dataset(&cfg, &base, None).unwrap();
        assert_eq!(ds.examples.len(), 100);
        assert!(ds.examples.iter().all(|e| e.meta.perturbation == Perturbation::LoadOnly));
        assert_eq!((ds.splits.train.len(), ds.splits.validation.len(), ds.splits.test.len()), (90, 5, 5));
        let mut all: Vec<usize> = ds.splits.train.iter().chain(&ds.splits.validation).chain(&ds.splits.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let base = parse_case(cases::CASE14).unwrap();
        let cfg = DatagenConfig::new("case14", 40, DatasetKind::TopDrop, 9);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &generate_dataset(&cfg, &base, None).unwrap()).unwrap();
        write_dataset(b.path(), &generate_dataset(&cfg, &base, None).unwrap()).unwrap();
        for f in [TRAIN_FILE, VALIDATION_FILE, TEST_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let back = read_dataset(a.path()).unwrap();
        assert_eq!(back.train.len() + back.validation.len() + back.test.len(), 40);
    }

    #[test]
    fn labeler_failures_are_capped() {
        let base = parse_case(cases::CASE9).unwrap();
        let mut cfg = DatagenConfig::new("case9", 10, DatasetKind::FullTop, 0);
        let fail: Labeler = &|_g: &Grid| Err(Error::Solver("no".into()));
        assert!(matches!(
            generate_dataset(&cfg, &base, Some(fail)),
            Err(Error::LabelerFailureRate { failed: 10, .. })
        ));
        cfg.max_label_failure_rate = 1.0;
        let ds = generate_dataset(&cfg, &base, Some(fail)).unwrap();
        assert_eq!(ds.failures.len(), 10);
        assert!(ds.examples.is_empty());
    }
}
