//! Adversarial example generation with a perceptual-distortion penalty.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode tape and a
//!   finite-difference oracle.
//! - [`classifier`]: a small convolutional classifier, its training loop and
//!   the `PDRM` model file format.
//! - [`perceptual`]: differentiable Gaussian-window SSIM.
//! - [`attacks`]: FGSM, I-FGSM, MI-FGSM, DIM, TIM, TI-DIM and the ILA losses.
//! - [`pdr`]: the SSIM-penalised objective with an adaptive penalty factor,
//!   driven by Adam (or momentum SGD for comparison).
//! - [`harness`]: synthetic data, sweeps, ASR/SSIM curves and CSV output.

pub mod attacks;
pub mod classifier;
pub mod error;
pub mod harness;
mod io;
pub mod pdr;
pub mod perceptual;
pub mod rng;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Tape, Tensor, Var};
