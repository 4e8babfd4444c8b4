//! Magnitude-preserving diffusion denoisers with power-function EMA.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense 64-bit tensors with a reverse-mode tape.
//! * [`mp_ops`]: magnitude-preserving layers and normalizations.
//! * [`network`]: a configurable toy U-Net denoiser with EDM preconditioning.
//! * [`loss`]: denoising score matching with learned uncertainty weighting.
//! * [`optim`]: Adam, forced weight normalization and learning-rate decay.
//! * [`ema`]: power-function EMA, snapshot storage and post-hoc reconstruction.
//! * [`sampler`]: deterministic second-order ODE sampler and guidance.
//! * [`harness`]: synthetic data, training loop, experiments and reports.

pub mod ema;
pub mod error;
pub mod harness;
pub mod loss;
pub mod mp_ops;
pub mod network;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, Var};
