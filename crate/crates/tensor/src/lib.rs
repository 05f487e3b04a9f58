//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! All values are `f64` row-major matrices. Computations are recorded on a
//! [`Graph`] tape and differentiated with [`Graph::backward`]. Parameters live
//! in a [`ParamStore`], are bound onto a graph per forward pass, and are
//! updated with [`AdamW`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, relative_error, FdReport};
pub use graph::{AttentionLayout, BlockDiag, Gradients, Graph, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, LinearWarmup};
pub use params::{glorot_uniform, truncated_normal, Bound, ParamStore};
pub use tensor::Tensor;
