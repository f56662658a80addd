//! AC optimal power flow with typed-graph neural networks.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`grid`]: per-unit grid model, Π-section parameters, connectivity.
//! - [`case_io`]: MATPOWER case parsing, line-delimited JSON datasets,
//!   model checkpoints.
//! - [`datagen`]: load and N-1 topology perturbations, dataset splits.
//! - [`constraints`]: objective, branch-flow derivation and violation degrees.
//! - [`acpf`]: Newton-Raphson power flow with reactive-limit enforcement.
//! - [`baselines`]: DC-OPF quadratic program and a penalty AC-OPF labeler.
//! - [`gnn`]: encode-process-decode model, loss, gradients and training.
//! - [`harness`]: evaluation metrics, reports and model-size sweeps.
//!
//! ```
//! use gridopf::{acpf, cases, case_io::parse_case};
//!
//! let grid = parse_case(cases::CASE14).unwrap();
//! let result = acpf::solve_pf(&grid, None, &acpf::PfOptions::default()).unwrap();
//! assert!(result.converged);
//! ```

pub mod acpf;
pub mod autodiff;
pub mod baselines;
pub mod case_io;
pub mod cases;
pub mod constraints;
pub mod datagen;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod grid;
pub mod harness;
pub mod synthetic;

pub use error::{Error, Result};
pub use grid::{Branch, BranchKind, Bus, BusType, Generator, Grid, Load, OpfSolution, Shunt};
