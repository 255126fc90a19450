//! Dense `N×C×H×W` tensors with a reverse-mode differentiation graph,
//! generic over the floating point element type.
//!
//! Training runs in `f32`; the same code instantiated at `f64` serves as the
//! shadow evaluation for gradient checks.

mod array;
pub mod conv;
mod error;
pub mod gradcheck;
mod graph;
mod nn;
pub mod optim;
mod scalar;

pub use array::{numel, Array, Shape};
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;

pub type Array32 = Array<f32>;
pub type Array64 = Array<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
