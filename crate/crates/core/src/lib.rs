//! Sensitivity-guided merging of task-specialized checkpoints.
//!
//! The crate bundles everything needed to study the method at desk scale:
//! a small `f64` tensor type, a tanh MLP with exact gradients, a
//! safetensors-compatible checkpoint container, task vectors, the
//! sensitivity analysis that produces per-layer merge coefficients, the
//! baseline mergers (average, task arithmetic, TIES, DARE), and an
//! experiment harness that trains toy task models and compares mergers.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod merge;
pub mod model;
pub mod seed;
pub mod sensitivity;
pub mod task_vector;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use merge::{MergeConfig, MergeMethod};
pub use model::{Batch, ModelSpec};
pub use sensitivity::{SensitivityMode, SensitivityReport};
pub use task_vector::{compute_task_vector, layer_partition, LayerPartition, TaskVector};
pub use tensor::Tensor;
