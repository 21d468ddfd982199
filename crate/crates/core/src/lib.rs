//! Cross-modal surface-normal estimation on a small CPU autodiff engine.
//!
//! Four networks share one latent space: an image encoder and decoder, and
//! a normal encoder and decoder. Skip connections run from the image encoder
//! into the normal decoder only, and can be switched off per pass so the
//! normal auto-encoder never depends on them.
//!
//! Modules:
//! - [`tensor`]: dense tensors, reverse-mode tape and gradient checking.
//! - [`model`]: the encoders, decoders, skip fusion and ablation variants.
//! - [`losses`]: masked cosine / L2 losses and angular-error statistics.
//! - [`data`]: synthetic Lambertian samples, PFM/PNG I/O, crop geometry.
//! - [`trainer`]: Adam, the batch-kind training schedule, checkpoints.
//! - [`evaluate`]: dataset reports and normal-mapped shading.
//! - [`grad_suite`]: the finite-difference checks behind `grad-check`.
//! - [`cli`]: the `crossnorm` command-line front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod grad_suite;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{gradient_check, GradCheckReport, Gradients, Scalar, Tape, Tensor, Var};
