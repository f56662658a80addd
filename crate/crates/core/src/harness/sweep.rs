//! Model-size sweep over the number of message-passing steps.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{train, ModelConfig, TrainConfig, TrainData, TrainOutput, ValidationRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Message-passing step counts, one model size each.
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub hidden_size: usize,
    pub train: TrainConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::InvalidArgument("sweep sizes must be a non-empty list of positive step counts".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one seed".into()));
        }
        if self.hidden_size == 0 {
            return Err(Error::InvalidArgument("hidden size must be positive".into()));
        }
        self.train.validate()
    }
}

/// One trained (size, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub steps: usize,
    pub seed: u64,
    /// Validation records in step order; empty when training failed.
    pub curve: Vec<ValidationRecord>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn final_constraint_loss(&self) -> Option<f64> {
        self.curve.last().map(|r| r.loss.constraint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub steps: usize,
    /// Seeds that trained successfully.
    pub seeds: usize,
    pub constraint_mean: Option<f64>,
    /// Population standard deviation across seeds.
    pub constraint_std: Option<f64>,
    pub supervised_mean: Option<f64>,
    pub total_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub sizes: Vec<SizeSummary>,
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (Some(m), Some(var.sqrt()))
}

fn summarize(steps: usize, cells: &[SweepCell]) -> SizeSummary {
    let finals: Vec<&ValidationRecord> = cells
        .iter()
        .filter(|c| c.steps == steps)
        .filter_map(|c| c.curve.last())
        .collect();
    let pick = |f: fn(&ValidationRecord) -> f64| finals.iter().map(|r| f(r)).collect::<Vec<_>>();
    let (constraint_mean, constraint_std) = mean_std(&pick(|r| r.loss.constraint));
    SizeSummary {
        steps,
        seeds: finals.len(),
        constraint_mean,
        constraint_std,
        supervised_mean: mean_std(&pick(|r| r.loss.supervised)).0,
        total_mean: mean_std(&pick(|r| r.loss.total)).0,
    }
}

/// Train every (size, seed) cell. A failing cell records its error and the
/// sweep moves on. With `out_dir`, each cell writes its logs and checkpoints
/// under `steps{S}_seed{K}`.
pub fn sweep(cfg: &SweepConfig, data: &TrainData, out_dir: Option<PathBuf>) -> Result<SweepReport> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &steps in &cfg.sizes {
        for &seed in &cfg.seeds {
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let out = TrainOutput {
                dir: out_dir.as_ref().map(|d| d.join(format!("steps{steps}_seed{seed}"))),
                resume: None,
            };
            let cell = match train(&train_cfg, ModelConfig::new(cfg.hidden_size, steps), data, &out) {
                Ok(o) => SweepCell {
                    steps,
                    seed,
                    curve: o.validation,
                    error: None,
                },
                Err(e) => SweepCell {
                    steps,
                    seed,
                    curve: Vec::new(),
                    error: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }
    let sizes = cfg.sizes.iter().map(|&s| summarize(s, &cells)).collect();
    Ok(SweepReport { cells, sizes })
}

impl SweepReport {
    /// Pairs `(smaller, larger)` of sizes whose mean final constraint loss
    /// does not get worse with more steps.
    pub fn improving_pairs(&self, pairs: &[(usize, usize)]) -> Vec<((usize, usize), bool)> {
        let get = |s: usize| self.sizes.iter().find(|z| z.steps == s).and_then(|z| z.constraint_mean);
        pairs
            .iter()
            .map(|&(a, b)| {
                let ok = matches!((get(a), get(b)), (Some(x), Some(y)) if y <= x);
                ((a, b), ok)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:>5}  {:>12}  {:>12}  {:>12}  {:>12}",
            "steps", "seeds", "constraint", "spread", "supervised", "total"
        );
        for s in &self.sizes {
            let _ = writeln!(
                out,
                "{:>6}  {:>5}  {:>12}  {:>12}  {:>12}  {:>12}",
                s.steps,
                s.seeds,
                fmt(s.constraint_mean),
                fmt(s.constraint_std),
                fmt(s.supervised_mean),
                fmt(s.total_mean)
            );
        }
        for c in self.cells.iter().filter(|c| c.error.is_some()) {
            let _ = writeln!(out, "steps {} seed {} failed: {}", c.steps, c.seed, c.error.as_deref().unwrap_or(""));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::LossParts;

    fn record(step: u64, constraint: f64) -> ValidationRecord {
        ValidationRecord {
            step,
            loss: LossParts {
                total: constraint,
                supervised: 0.0,
                constraint,
            },
            violation_means: Default::default(),
            trmae: Default::default(),
        }
    }

    fn cell(steps: usize, seed: u64, last: f64) -> SweepCell {
        SweepCell {
            steps,
            seed,
            curve: vec![record(0, 9.0), record(10, last)],
            error: None,
        }
    }

    #[test]
    fn summary_uses_final_records() {
        let cells = vec![cell(2, 0, 1.0), cell(2, 1, 3.0), cell(4, 0, 0.5)];
        let s = summarize(2, &cells);
        assert_eq!(s.seeds, 2);
        assert_eq!(s.constraint_mean, Some(2.0));
        assert_eq!(s.constraint_std, Some(1.0));
        let s = summarize(4, &cells);
        assert_eq!(s.constraint_std, Some(0.0));
    }

    #[test]
    fn failed_cells_are_skipped_in_summaries() {
        let mut cells = vec![cell(2, 0, 1.0), cell(2, 1, 3.0)];
        cells[1].curve.clear();
        cells[1].error = Some("boom".into());
        let report = SweepReport {
            sizes: vec![summarize(2, &cells)],
            cells,
        };
        assert_eq!(report.sizes[0].seeds, 1);
        assert_eq!(report.sizes[0].constraint_mean, Some(1.0));
        assert!(report.to_text().contains("failed: boom"));
    }

    #[test]
    fn pairs_compare_means() {
        let cells = vec![cell(2, 0, 1.0), cell(4, 0, 0.5), cell(8, 0, 0.7)];
        let report = SweepReport {
            sizes: [2, 4, 8].iter().map(|&s| summarize(s, &cells)).collect(),
            cells,
        };
        let p = report.improving_pairs(&[(2, 4), (4, 8), (2, 8)]);
        assert_eq!(p.iter().map(|x| x.1).collect::<Vec<_>>(), vec![true, false, true]);
    }

    #[test]
    fn single_size_matches_plain_training() {
        use crate::baselines::{solve_acopf_penalty, PenaltyConfig};
        use crate::case_io::parse_case;
        use crate::cases;
        use crate::datagen::{generate_example, DatagenConfig, DatasetKind};
        use crate::graph::StandardizationStats;

        let base = parse_case(cases::CASE9).unwrap();
        let dcfg = DatagenConfig::new("case9", 4, DatasetKind::FullTop, 1);
        let ex: Vec<_> = (0..4)
            .map(|i| {
                let mut e = generate_example(&dcfg, &base, i).unwrap();
                e.solution = Some(solve_acopf_penalty(&e.grid, &PenaltyConfig::default()).unwrap().solution);
                e
            })
            .collect();
        let stats = StandardizationStats::fit(ex[..3].iter().map(|e| (&e.grid, e.solution.as_ref())));
        let data = TrainData {
            train: &ex[..3],
            validation: &ex[3..],
            stats: &stats,
        };
        let train_cfg = TrainConfig {
            total_steps: 3,
            batch_size: 2,
            warmup_steps: 1,
            seed: 7,
            ..TrainConfig::default()
        };
        let cfg = SweepConfig {
            sizes: vec![2],
            seeds: vec![7],
            hidden_size: 4,
            train: train_cfg.clone(),
        };
        let report = sweep(&cfg, &data, None).unwrap();
        let plain = train(&train_cfg, ModelConfig::new(4, 2), &data, &TrainOutput::default()).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.cells[0].curve, plain.validation);
        assert_eq!(report.sizes[0].constraint_std, Some(0.0));
    }

    #[test]
    fn rejects_empty_sizes() {
        let cfg = SweepConfig {
            sizes: vec![],
            seeds: vec![0],
            hidden_size: 8,
            train: TrainConfig::default(),
        };
        assert!(cfg.validate().is_err());
    }
}
