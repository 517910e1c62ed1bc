//! Reversible duplex Conformer and duplex diffusion model.
//!
//! One parameter set defines both a forward mapping `X -> Y` and its exact
//! inverse `Y -> X`. The crate contains the tensor engine the model is built
//! on, the reversible blocks and symmetric stack, DDPM machinery with duplex
//! noise-prediction training, CTC-based losses and decoding, a synthetic
//! bilingual unit corpus, and the three-stage training procedure.

pub mod error;
pub mod eval;
pub mod format;
pub mod gradcheck;
pub mod bleu;
pub mod config;
pub mod data;
pub mod decode;
pub mod diffusion;
pub mod losses;
pub mod model;
pub mod params;
pub mod rdc;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
