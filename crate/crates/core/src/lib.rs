//! Unpaired statistical downscaling on the 1D Kuramoto–Sivashinsky system.
//!
//! A low-fidelity, low-resolution field is first debiased with an entropic
//! optimal-transport map onto the distribution of coarsened high-fidelity
//! fields, then upsampled by a diffusion model whose denoiser is modified
//! at inference time to satisfy the linear coarsening constraint exactly.

pub mod baselines;
pub mod conditioning;
pub mod dataset;
mod error;
pub mod diffusion;
pub mod field;
pub mod metrics;
pub mod net;
pub mod pde;
pub mod ot;
pub mod rng;
pub mod train;

pub use error::{CoreError, Result};
