//! Multi-exposure image fusion with latency-constrained differentiable
//! architecture search.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine over `f64` arrays.
//! - [`data`]: exposure-pair synthesis, PNG I/O and augmentation.
//! - [`ops`]: the searchable operator set and softmax-relaxed search cells.
//! - [`net`]: relighting, deformable alignment and detail repletion modules
//!   assembled into a fusion network.
//! - [`nas`]: latency tables, latency-regularized bilevel search and genotypes.
//! - [`loss`]: intensity, Sobel-gradient and WGAN-GP adversarial losses.
//! - [`train`]: training, metrics, checkpoints and ablation drivers.

pub mod data;
pub mod error;
pub mod loss;
pub mod nas;
pub mod net;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
