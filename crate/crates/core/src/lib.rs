//! Inverse adversarial training on a small reverse-mode autodiff engine.

pub mod attack;
pub mod checkpoint;
pub mod cli;
pub(crate) mod codec;
pub mod config;
pub mod counters;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inverse;
pub mod kernels;
pub mod model;
pub mod momentum;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Classifier, ForwardOutput, NetworkSpec, NetworkState};
pub use tensor::Tensor;
pub use trace::{Gradients, NodeId, OpKind, Reduction, Trace};
