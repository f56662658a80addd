//! Training loop: learning-rate schedule, deterministic batching, Adam,
//! periodic validation and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::batch::Batch;
use super::loss::{batch_loss, gradient, LossParts};
use super::model::predict;
use super::params::ModelParams;
use super::ModelConfig;
use crate::case_io::{load_checkpoint, save_checkpoint, Checkpoint, Example};
use crate::constraints::violation_degrees;
use crate::error::{Error, Result};
use crate::graph::{to_typed_graph, StandardizationStats, TypedGraph};
use crate::harness::metrics::{trmae, TRMAE_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub decay_rate: f64,
    pub transition_steps: u64,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Write a checkpoint every this many updates; 0 writes only the last.
    pub checkpoint_every: u64,
    /// Validate every this many updates; 0 validates only at the start and
    /// the end.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 10_000,
            batch_size: 32,
            warmup_steps: 10_000,
            peak_lr: 2e-4,
            decay_rate: 0.9,
            transition_steps: 4_000,
            final_lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    /// The default schedule squeezed into `total_steps`: warmup over the
    /// first tenth, one decay transition per fifth.
    pub fn compressed(total_steps: u64) -> Self {
        TrainConfig {
            total_steps,
            warmup_steps: total_steps / 10,
            transition_steps: (total_steps / 5).max(1),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.peak_lr > 0.0
            && self.final_lr > 0.0
            && self.final_lr < self.peak_lr
            && self.decay_rate > 0.0
            && self.decay_rate < 1.0
            && self.transition_steps > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then exponential decay floored at `final_lr`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let k = (step - cfg.warmup_steps) as f64 / cfg.transition_steps as f64;
    (cfg.peak_lr * cfg.decay_rate.powf(k)).max(cfg.final_lr)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_con: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Number of updates applied before this evaluation.
    pub step: u64,
    pub loss: LossParts,
    /// Mean violation degree per constraint family.
    pub violation_means: BTreeMap<String, f64>,
    /// TRMAE per predicted quantity, over the whole split.
    pub trmae: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: Adam,
    pub steps_done: u64,
    pub log: Vec<TrainLogRecord>,
    pub validation: Vec<ValidationRecord>,
}

/// Data consumed by [`train`].
pub struct TrainData<'a> {
    pub train: &'a [Example],
    pub validation: &'a [Example],
    pub stats: &'a StandardizationStats,
}

/// Where training state lives on disk.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    /// Directory for `checkpoint.json`, `metrics.jsonl` and
    /// `validation.jsonl`; nothing is written when absent.
    pub dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";

/// Example indices of update `step` (1-based). Consecutive updates walk
/// through a fresh seeded permutation per epoch.
pub fn batch_indices(step: u64, batch_size: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    let start = (step - 1) * batch_size as u64;
    (0..batch_size as u64)
        .map(|j| {
            let p = start + j;
            let epoch = p / n as u64;
            if cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cache = Some((epoch, epoch_permutation(n, seed, epoch)));
            }
            cache.as_ref().expect("filled").1[(p % n as u64) as usize]
        })
        .collect()
}

fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

struct Prepared<'a> {
    examples: &'a [Example],
    graphs: Vec<TypedGraph>,
}

impl<'a> Prepared<'a> {
    fn new(examples: &'a [Example], stats: &StandardizationStats) -> Result<Self> {
        let graphs = examples
            .iter()
            .map(|e| to_typed_graph(&e.grid, stats))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { examples, graphs })
    }

    fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let items: Vec<_> = idx
            .iter()
            .map(|&i| (&self.examples[i].grid, self.examples[i].solution.as_ref()))
            .collect();
        let graphs: Vec<&TypedGraph> = idx.iter().map(|&i| &self.graphs[i]).collect();
        Batch::from_graphs(&items, &graphs)
    }
}

/// Loss, violation means and TRMAE of `params` over a split.
pub fn validate(params: &ModelParams, examples: &[Example], stats: &StandardizationStats, batch_size: usize, step: u64) -> Result<ValidationRecord> {
    let prepared = Prepared::new(examples, stats)?;
    validate_prepared(params, &prepared, batch_size, step)
}

fn validate_prepared(params: &ModelParams, data: &Prepared, batch_size: usize, step: u64) -> Result<ValidationRecord> {
    let n = data.examples.len();
    if n == 0 {
        return Err(Error::Missing("validation examples".into()));
    }
    let mut loss = LossParts {
        total: 0.0,
        supervised: 0.0,
        constraint: 0.0,
    };
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let names = ["va", "vm", "pg", "qg", "pf", "qf", "pt", "qt"];
    let mut pred_cols: Vec<Vec<f64>> = vec![Vec::new(); 8];
    let mut target_cols: Vec<Vec<f64>> = vec![Vec::new(); 8];
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let parts = batch_loss(params, &batch)?;
        let w = chunk.len() as f64 / n as f64;
        loss.total += w * parts.total;
        loss.supervised += w * parts.supervised;
        loss.constraint += w * parts.constraint;
        let grids: Vec<_> = chunk.iter().map(|&i| &data.examples[i].grid).collect();
        let preds = predict(params, &batch, &grids)?;
        for (pred, &i) in preds.iter().zip(chunk) {
            let ex = &data.examples[i];
            let report = violation_degrees(&ex.grid, pred)?;
            for (family, degrees) in report.iter() {
                let e = sums.entry(family.label().to_string()).or_insert((0.0, 0));
                e.0 += degrees.degrees.iter().sum::<f64>();
                e.1 += degrees.len();
            }
            if let Some(target) = &ex.solution {
                let p = [&pred.va, &pred.vm, &pred.pg, &pred.qg, &pred.pf, &pred.qf, &pred.pt, &pred.qt];
                let t = [&target.va, &target.vm, &target.pg, &target.qg, &target.pf, &target.qf, &target.pt, &target.qt];
                for k in 0..8 {
                    pred_cols[k].extend_from_slice(p[k]);
                    target_cols[k].extend_from_slice(t[k]);
                }
            }
        }
    }
    let violation_means = sums
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    let trmae = names
        .iter()
        .enumerate()
        .map(|(k, name)| Ok((name.to_string(), trmae(&pred_cols[k], &target_cols[k], TRMAE_THRESHOLD)?)))
        .collect::<Result<_>>()?;
    Ok(ValidationRecord {
        step,
        loss,
        violation_means,
        trmae,
    })
}

fn append_json<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(serde_json::to_string(record)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Train a model on labeled examples.
///
/// Each update `s` draws its batch with [`batch_indices`] and uses
/// `lr_at(s)`. A non-finite loss aborts training; the checkpoint on disk is
/// then the last one written from finite parameters.
pub fn train(cfg: &TrainConfig, model_cfg: ModelConfig, data: &TrainData, out: &TrainOutput) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Missing("training examples".into()));
    }
    if let Some(i) = data.train.iter().position(|e| e.solution.is_none()) {
        return Err(Error::Missing(format!("label for training example {i}")));
    }
    let (mut params, mut adam, start) = match &out.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.params.config != model_cfg {
                return Err(Error::InvalidArgument("checkpoint model config differs".into()));
            }
            if &ck.stats != data.stats {
                return Err(Error::InvalidArgument("checkpoint standardization stats differ".into()));
            }
            (ck.params, ck.adam, ck.step)
        }
        None => {
            let p = ModelParams::init(model_cfg, cfg.seed)?;
            let a = Adam::new(&p, cfg.beta1, cfg.beta2, cfg.epsilon);
            (p, a, 0)
        }
    };
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir)?;
    }
    let train_set = Prepared::new(data.train, data.stats)?;
    let val_set = if data.validation.is_empty() {
        None
    } else {
        Some(Prepared::new(data.validation, data.stats)?)
    };
    let n = data.train.len();
    let bs = cfg.batch_size;
    let mut log = Vec::new();
    let mut validation = Vec::new();

    let run_validation = |params: &ModelParams, step: u64, validation: &mut Vec<ValidationRecord>| -> Result<()> {
        if let Some(v) = &val_set {
            let rec = validate_prepared(params, v, bs, step)?;
            if let Some(dir) = &out.dir {
                append_json(&dir.join(VALIDATION_FILE), &rec)?;
            }
            validation.push(rec);
        }
        Ok(())
    };
    let save = |params: &ModelParams, adam: &Adam, step: u64| -> Result<()> {
        if let Some(dir) = &out.dir {
            let ck = Checkpoint::new(params.clone(), adam.clone(), step, data.stats.clone());
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &ck)?;
        }
        Ok(())
    };

    if start == 0 {
        run_validation(&params, 0, &mut validation)?;
    }
    for step in start + 1..=cfg.total_steps {
        let idx = batch_indices(step, bs, n, cfg.seed);
        let batch = train_set.batch(&idx)?;
        let (parts, grads) = match gradient(&params, &batch) {
            Ok(x) => x,
            Err(Error::NonFiniteLoss { example }) => {
                return Err(Error::NonFiniteLoss { example: idx[example] });
            }
            Err(e) => return Err(e),
        };
        let lr = lr_at(step, cfg);
        adam.step(&mut params, &grads, lr)?;
        let rec = TrainLogRecord {
            step,
            lr,
            loss_total: parts.total,
            loss_sup: parts.supervised,
            loss_con: parts.constraint,
        };
        if let Some(dir) = &out.dir {
            append_json(&dir.join(METRICS_FILE), &rec)?;
        }
        log.push(rec);
        let last = step == cfg.total_steps;
        if last || (cfg.validate_every > 0 && step % cfg.validate_every == 0) {
            run_validation(&params, step, &mut validation)?;
        }
        if last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save(&params, &adam, step)?;
        }
    }
    Ok(TrainOutcome {
        params,
        adam,
        steps_done: cfg.total_steps.max(start),
        log,
        validation,
    })
}
