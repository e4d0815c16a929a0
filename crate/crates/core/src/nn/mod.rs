//! Dense tensors, reverse-mode differentiation, layers and the optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{coordinate_error, grad_check, grad_check_params, relative_error, roundoff_band};
pub use graph::{Gradients, Graph, Var};
pub use layers::{ConditionalBatchNorm, LinearLayer, Mode};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{ParamId, ParamStore, Tensor};
