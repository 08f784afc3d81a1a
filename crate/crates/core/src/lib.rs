//! Masked-autoencoder pre-training, distillation and layer analysis for
//! lightweight Vision Transformers at desk scale.
//!
//! Everything runs on a small tape-based autodiff engine ([`tensor`]); the
//! encoder lives in [`vit`], masked pre-training in [`mae`], teacher–student
//! losses in [`distill`], the similarity/spectrum toolkit in [`analysis`],
//! optimizers and evaluation loops in [`train`], and configs, datasets,
//! checkpoints and command runners in [`io`].

pub mod analysis;
pub mod distill;
pub mod error;
pub mod io;
pub mod mae;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
