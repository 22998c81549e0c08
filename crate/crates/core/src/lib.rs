//! Desk-scale Vision Transformer training and compression.
//!
//! - [`tensor`] / [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`vit`]: the model, with hook taps inside every encoder block.
//! - [`sparse`]: the `ln(1 + h²)` activation penalty added to the loss.
//! - [`prune`]: global L1-unstructured magnitude pruning.
//! - [`data`] / [`train`]: datasets, SGD loop, evaluation and the pruning sweep.
//! - [`gradcheck`]: finite-difference checks of the full penalized loss.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod prune;
pub mod sparse;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{finite_diff_grad, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use sparse::{SparseConfig, SparsePosition};
pub use tensor::Tensor;
pub use vit::{ParamStore, ViTConfig};
