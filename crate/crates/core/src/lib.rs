//! Diffusion-model warm starts for AC optimal power flow.
//!
//! The crate covers the whole pipeline: a network model and AC-OPF solver
//! that produce a history of operating records, a denoising diffusion model
//! trained on joint load/dispatch vectors, measurement-guided sampling of
//! dispatch given loads, projection of samples onto the power-flow manifold,
//! and the statistics used to judge the resulting warm starts.

pub mod acopf;
pub mod baseline;
pub mod cases;
pub mod dataset;
pub mod diffusion;
pub mod evalx;
pub mod grid;
pub mod guidance;
pub mod nnet;
pub mod restore;
pub mod rng;
