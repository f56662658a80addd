//! Reference solvers: DC-OPF and a penalty-method AC-OPF labeler.

pub mod dcopf;
pub mod lbfgs;
pub mod newton;
pub mod penalty;
pub mod qp;
mod refine;

pub use dcopf::{complete_dc_solution, dc_kkt_residuals, solve_dcopf, DcDuals, DcKkt, DcSolution};
pub use qp::{kkt_residuals, solve_qp, KktResiduals, Qp, QpOptions, QpSolution};
pub use penalty::{label, solve_acopf_penalty, PenaltyConfig, PenaltyResult};
