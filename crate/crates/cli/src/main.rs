//! `gridopf` command-line tool.
//!
//! Every subcommand takes `--seed` and `--out`. With `--out`, structured
//! results go to JSON files in that directory next to a `report.txt`; the
//! text report is always printed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gridopf::acpf::{solve_pf, PfOptions, PfResult};
use gridopf::baselines::{complete_dc_solution, solve_acopf_penalty, solve_dcopf, PenaltyConfig};
use gridopf::case_io::{load_checkpoint, parse_case, read_examples, write_examples, Example};
use gridopf::datagen::{
    generate_dataset, label_examples, read_dataset, write_dataset, DatagenConfig, DatasetKind, TEST_FILE, TRAIN_FILE,
    VALIDATION_FILE,
};
use gridopf::gnn::{train, ModelConfig, TrainConfig, TrainData, TrainOutput};
use gridopf::graph::StandardizationStats;
use gridopf::harness::{evaluate, sweep, Method, SweepConfig};
use gridopf::{cases, Grid, OpfSolution};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Grid(#[from] gridopf::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "gridopf", version, about = "AC optimal power flow with typed-graph neural networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for structured results.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Fulltop,
    Topdrop,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum LabelWith {
    Ref,
    Dc,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Penalty,
    Dc,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a MATPOWER case and print its element counts.
    Parse {
        /// Case file, or a bundled case name (case4, case9, case14, case30).
        #[arg(long)]
        case: String,
    },
    /// Generate a perturbed dataset with train/validation/test splits.
    Gen {
        #[arg(long)]
        case: String,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "ref")]
        label: LabelWith,
    },
    /// Label (or relabel) every split of a dataset directory.
    Label {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "penalty")]
        solver: Solver,
    },
    /// Train a model on a labeled dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        /// Message-passing steps.
        #[arg(long, default_value_t = 48)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 10_000)]
        total_steps: u64,
        #[command(flatten)]
        schedule: Schedule,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a model or the DC baseline on a dataset split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Model checkpoint; without it the DC-OPF baseline is evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Skip power flow restoration.
        #[arg(long)]
        no_pf: bool,
    },
    /// Solve the AC power flow of a grid.
    Pf {
        /// Case file, grid JSON, or bundled case name.
        #[arg(long)]
        grid: String,
        /// Starting point as an OPF solution JSON.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        enforce_q_lims: bool,
    },
    /// Solve the DC-OPF of a grid.
    Dcopf {
        #[arg(long)]
        grid: String,
        /// Complete the dispatch to an AC solution by power flow.
        #[arg(long)]
        complete: bool,
    },
    /// Train one model per message-passing size and seed.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        sizes: Vec<usize>,
        /// Number of seeds per size, counting up from `--seed`.
        #[arg(long, default_value_t = 2)]
        seeds: u64,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 2_000)]
        total_steps: u64,
        #[command(flatten)]
        schedule: Schedule,
    },
}

#[derive(Args, Clone)]
struct Schedule {
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    transition_steps: Option<u64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    /// Run validation every this many steps (0: only at the start and end).
    #[arg(long, default_value_t = 0)]
    validate_every: u64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

impl Schedule {
    fn apply(&self, total_steps: u64, batch: usize, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            total_steps,
            batch_size: batch,
            warmup_steps: self.warmup_steps.unwrap_or(d.warmup_steps),
            transition_steps: self.transition_steps.unwrap_or(d.transition_steps),
            peak_lr: self.peak_lr.unwrap_or(d.peak_lr),
            validate_every: self.validate_every,
            checkpoint_every: self.checkpoint_every,
            seed,
            ..d
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A bundled case name, a MATPOWER file, or a grid JSON file.
fn load_grid(spec: &str) -> Result<Grid> {
    if let Some(text) = cases::builtin(spec) {
        return Ok(parse_case(text)?);
    }
    let text = read_text(Path::new(spec))?;
    if text.trim_start().starts_with('{') {
        let g: Grid = serde_json::from_str(&text)?;
        g.validate()?;
        Ok(g)
    } else {
        Ok(parse_case(&text)?)
    }
}

fn case_name(spec: &str) -> String {
    Path::new(spec)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string())
}

struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|source| CliError::Io { path: d.clone(), source })?;
        }
        Ok(Output { dir })
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        if let Some(d) = &self.dir {
            let p = d.join(name);
            fs::write(&p, serde_json::to_string_pretty(value)?).map_err(|source| CliError::Io { path: p, source })?;
        }
        Ok(())
    }

    fn text(&self, text: &str) -> Result<()> {
        print!("{text}");
        if let Some(d) = &self.dir {
            let p = d.join("report.txt");
            fs::write(&p, text).map_err(|source| CliError::Io { path: p, source })?;
        }
        Ok(())
    }
}

fn pf_text(r: &PfResult) -> String {
    let mut s = format!(
        "converged: {}\nnewton iterations: {} (max per solve {})\nq-limit passes: {}\nmax mismatch: {:.3e}\n",
        r.converged, r.iterations, r.max_inner_iterations, r.outer_iterations, r.mismatch
    );
    if !r.limited_buses.is_empty() {
        s += &format!("buses switched to PQ: {:?}\n", r.limited_buses);
    }
    if let Some(m) = &r.message {
        s += &format!("note: {m}\n");
    }
    s
}

fn penalty_labeler(seed: u64) -> impl Fn(&Grid) -> gridopf::Result<OpfSolution> + Sync {
    move |g: &Grid| {
        let cfg = PenaltyConfig {
            seed,
            ..PenaltyConfig::default()
        };
        let r = solve_acopf_penalty(g, &cfg)?;
        if !r.converged {
            return Err(gridopf::Error::Solver(format!("balance degree {:.3e} above tolerance", r.max_balance)));
        }
        Ok(r.solution)
    }
}

fn dc_labeler(g: &Grid) -> gridopf::Result<OpfSolution> {
    let r = complete_dc_solution(g, &solve_dcopf(g)?)?;
    if !r.converged {
        return Err(gridopf::Error::Solver("power flow completion did not converge".into()));
    }
    Ok(r.solution)
}

fn train_data_stats(train_set: &[Example]) -> StandardizationStats {
    StandardizationStats::fit(train_set.iter().map(|e| (&e.grid, e.solution.as_ref())))
}

fn run(cli: Cli) -> Result<()> {
    let Common { seed, out } = cli.common;
    let out = Output::new(out)?;
    match cli.command {
        Command::Parse { case } => {
            let g = load_grid(&case)?;
            out.json("grid.json", &g)?;
            let (pd, qd) = g.total_load();
            out.text(&format!(
                "buses: {}\ngenerators: {}\nloads: {}\nshunts: {}\nbranches: {} ({} transformers)\ntotal load: {:.4} p.u. + j{:.4} p.u.\n",
                g.buses.len(),
                g.generators.len(),
                g.loads.len(),
                g.shunts.len(),
                g.branches.len(),
                g.branches.iter().filter(|b| b.kind == gridopf::BranchKind::Transformer).count(),
                pd,
                qd
            ))
        }
        Command::Gen { case, kind, n, label } => {
            let dir = out.dir.clone().ok_or_else(|| CliError::Usage("gen needs --out".into()))?;
            let base = load_grid(&case)?;
            let kind = match kind {
                Kind::Fulltop => DatasetKind::FullTop,
                Kind::Topdrop => DatasetKind::TopDrop,
            };
            let cfg = DatagenConfig::new(case_name(&case), n, kind, seed);
            let penalty = penalty_labeler(seed);
            let ds = match label {
                LabelWith::Ref => generate_dataset(&cfg, &base, Some(&penalty))?,
                LabelWith::Dc => generate_dataset(&cfg, &base, Some(&dc_labeler))?,
                LabelWith::None => generate_dataset(&cfg, &base, None)?,
            };
            write_dataset(&dir, &ds)?;
            out.text(&format!(
                "examples: {}\nsplits: {} train, {} validation, {} test\nlabel failures: {}\n",
                ds.examples.len(),
                ds.splits.train.len(),
                ds.splits.validation.len(),
                ds.splits.test.len(),
                ds.failures.len()
            ))
        }
        Command::Label { dataset, solver } => {
            let target = out.dir.clone().unwrap_or_else(|| dataset.clone());
            let penalty = penalty_labeler(seed);
            let mut text = String::new();
            for file in [TRAIN_FILE, VALIDATION_FILE, TEST_FILE] {
                let src = dataset.join(file);
                if !src.exists() {
                    continue;
                }
                let examples = read_examples(&src)?;
                let total = examples.len();
                let (kept, failures) = match solver {
                    Solver::Penalty => label_examples(examples, &penalty, 1.0)?,
                    Solver::Dc => label_examples(examples, &dc_labeler, 1.0)?,
                };
                fs::create_dir_all(&target).map_err(|source| CliError::Io {
                    path: target.clone(),
                    source,
                })?;
                write_examples(&target.join(file), &kept)?;
                text += &format!("{file}: {} of {total} labeled\n", kept.len());
                for f in failures {
                    text += &format!("  example {} failed: {}\n", f.index, f.message);
                }
            }
            out.text(&text)
        }
        Command::Train {
            dataset,
            hidden,
            steps,
            batch,
            total_steps,
            schedule,
            resume,
        } => {
            let splits = read_dataset(&dataset)?;
            let stats = match &resume {
                Some(p) => load_checkpoint(p)?.stats,
                None => train_data_stats(&splits.train),
            };
            let cfg = schedule.apply(total_steps, batch, seed);
            let data = TrainData {
                train: &splits.train,
                validation: &splits.validation,
                stats: &stats,
            };
            let outcome = train(&cfg, ModelConfig::new(hidden, steps), &data, &TrainOutput { dir: out.dir.clone(), resume })?;
            out.json("train_config.json", &cfg)?;
            let mut text = format!("steps done: {}\n", outcome.steps_done);
            for v in &outcome.validation {
                text += &format!(
                    "validation step {:>7}: total {:.4e}  supervised {:.4e}  constraint {:.4e}\n",
                    v.step, v.loss.total, v.loss.supervised, v.loss.constraint
                );
            }
            out.text(&text)
        }
        Command::Eval {
            dataset,
            checkpoint,
            split,
            batch,
            no_pf,
        } => {
            let file = match split {
                Split::Train => TRAIN_FILE,
                Split::Val => VALIDATION_FILE,
                Split::Test => TEST_FILE,
            };
            let examples = read_examples(&dataset.join(file))?;
            let report = match &checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    let method = Method::Model {
                        params: &ck.params,
                        stats: &ck.stats,
                        batch_size: batch,
                    };
                    evaluate(method, &examples, !no_pf)?
                }
                None => evaluate(Method::DcOpf, &examples, !no_pf)?,
            };
            out.json("eval.json", &report)?;
            out.text(&report.to_text())
        }
        Command::Pf {
            grid,
            init,
            tol,
            enforce_q_lims,
        } => {
            let g = load_grid(&grid)?;
            let init: Option<OpfSolution> = match &init {
                Some(p) => Some(serde_json::from_str(&read_text(p)?)?),
                None => None,
            };
            let opts = PfOptions {
                tol,
                enforce_q_lims,
                ..PfOptions::default()
            };
            let r = solve_pf(&g, init.as_ref(), &opts)?;
            out.json("pf.json", &r)?;
            out.text(&pf_text(&r))
        }
        Command::Dcopf { grid, complete } => {
            let g = load_grid(&grid)?;
            let dc = solve_dcopf(&g)?;
            let mut text = format!("objective: {:.6}\ninterior-point iterations: {}\n", dc.objective, dc.iterations);
            out.json("dcopf.json", &dc)?;
            if complete {
                let r = complete_dc_solution(&g, &dc)?;
                text += "completion by power flow:\n";
                text += &pf_text(&r);
                out.json("completed.json", &r)?;
            }
            out.text(&text)
        }
        Command::Sweep {
            dataset,
            sizes,
            seeds,
            hidden,
            batch,
            total_steps,
            schedule,
        } => {
            let splits = read_dataset(&dataset)?;
            let stats = train_data_stats(&splits.train);
            let cfg = SweepConfig {
                sizes,
                seeds: (seed..seed + seeds.max(1)).collect(),
                hidden_size: hidden,
                train: schedule.apply(total_steps, batch, seed),
            };
            let data = TrainData {
                train: &splits.train,
                validation: &splits.validation,
                stats: &stats,
            };
            let report = sweep(&cfg, &data, out.dir.clone())?;
            out.json("sweep.json", &report)?;
            out.text(&report.to_text())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
