//! Mixture of low-rank experts (MoLE) with soft per-token and per-input
//! sigmoid gating, and a small denoising-diffusion testbed that trains it in
//! three stages.

pub mod error;
pub mod tensor;

pub use error::{MoleError, Result};
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod lora;
pub mod mole;
pub mod pipeline;
pub mod telemetry;
pub mod workflow;
