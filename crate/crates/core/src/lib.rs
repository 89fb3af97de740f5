//! Trajectory-conditioned manipulation success prediction.
//!
//! Given a language instruction, pre-manipulation scene features and a planned
//! end-effector trajectory, the model in [`model`] outputs the probability
//! that the manipulation will succeed, before it is executed.

mod binio;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod training;
pub mod trajectory;
pub mod world;

pub use error::{Error, Result, TensorError};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use optim::{AdamConfig, OptimizerState};
pub use tensor::{Scalar, Tensor};
