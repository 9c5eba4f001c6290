//! Feature-sharing cascade detection heads at desk scale.
//!
//! Classification features are shared across cascade stages in parallel (each
//! stage sums the two-layer FC transforms of itself and every preceding stage);
//! localization features are shared serially through a residual conv chain.
//! Everything runs on a small `f64` reverse-mode autodiff substrate.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kernels;
pub mod model;
pub mod param;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use geometry::{BBox, LabeledBox, ScoredBox};
pub use param::{sgd_step, GradMap, ParamStore, Parameter};
pub use tensor::Tensor;
