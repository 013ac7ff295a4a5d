//! The unrolled invertible diffusion solver for channel gain maps.
//!
//! Layers and blocks carry explicit forward/backward pairs; coupling
//! modules additionally have exact inverses so the backward pass can
//! reconstruct inputs from outputs instead of caching them. The sampler
//! iterates a deterministic denoise-project-update operator inside an
//! invertible two-stream state update, so training memory stays
//! near-constant in the number of diffusion steps.

pub mod act;
pub mod backprop;
pub mod blocks;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod sampler;
pub mod unet;

pub use backprop::{
    backward_cached, backward_invertible, forward_cached, forward_terminal, DriftReport,
    SolveTapeCached, TerminalTape,
};
pub use blocks::{Aux, Body, CouplingModule, PriorMaps, TimeEmbedding};
pub use checkpoint::{load_solver, save_solver};
pub use sampler::{
    ddim_update, estimate_x0, Schedule, SamplerState, SolverConfig, SolverInputs, StepScalars,
    UnrolledSolver,
};
pub use unet::{CacheMode, InvUNet, UNetConfig, UNetTape};
