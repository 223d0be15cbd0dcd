//! Minimal dense-matrix compute core with reverse-mode differentiation:
//! embedding lookup, wide tanh convolution, the pooling family, cosine,
//! margin ranking loss, and Adagrad with L2 and diversity regularization.
//!
//! Training arithmetic is `f32`; the same code runs in `f64` shadow mode for
//! gradient checks.

pub mod checkpoint;
pub mod graph;
pub mod matrix;
pub mod ops;
pub mod param;

pub use graph::{Graph, NodeId};
pub use matrix::{Matrix, Scalar};
pub use param::{diversity_penalty, diversity_penalty_grad, init_bound, ParamId, ParamSet, Parameter};
