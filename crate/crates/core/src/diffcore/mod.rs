//! Reverse-mode differentiation substrate, optimizer and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use graph::{Conv2dSpec, Graph, NodeId};
pub use params::{LrSchedule, Param, ParamId, ParamStore, Sgd};
pub use tensor::{Real, Tensor};
