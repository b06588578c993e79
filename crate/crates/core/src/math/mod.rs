//! Dense linear algebra, a per-operation autodiff tape, optimizers, a
//! finite-difference gradient oracle, and the checkpoint container.

mod checkpoint;
mod gradcheck;
mod layers;
mod matrix;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport, REL_ERR_FLOOR};
pub use layers::Dense;
pub use matrix::Matrix;
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{activation_forward, affine_forward, sigmoid, Activation, Bound, Gradients, NodeId, Tape};
