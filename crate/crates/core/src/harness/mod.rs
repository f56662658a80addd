//! Evaluation metrics, reports and experiment drivers.

pub mod eval;
pub mod metrics;
pub mod sweep;

pub use eval::{evaluate, evaluate_predictions, predictions, EvalReport, FeasibilityRow, FeatureMetrics, Method, PostPf, Prediction, Timings};
pub use metrics::{mse, optimality_ratio, trmae, TRMAE_THRESHOLD};
pub use sweep::{sweep, SizeSummary, SweepCell, SweepConfig, SweepReport};
