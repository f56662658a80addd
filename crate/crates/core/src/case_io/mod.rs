//! Case files, dataset records and model checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod matpower;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use dataset::{
    read_example, read_examples, write_example, write_examples, ComponentKind, Dropped, Example,
    ExampleMeta, Perturbation,
};
pub use matpower::parse_case;
