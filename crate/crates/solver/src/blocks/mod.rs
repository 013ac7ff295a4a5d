//! Differentiable building blocks of the noise estimator: residual
//! blocks with time-conditioned feature modulation, single-head spatial
//! attention, the multi-scale prior-informed injector, the sinusoidal
//! time embedding and the two-stream additive coupling wrapper with an
//! exact inverse.

mod attention;
mod coupling;
mod injector;
mod residual;
mod time;

pub use attention::{AttentionBlock, AttentionTape};
pub use coupling::{Body, BodyTape, CouplingModule, CouplingTape};
pub use injector::{InjectorBlock, InjectorTape};
pub use residual::{ResidualBlock, ResidualTape};
pub use time::{TimeEmbedding, TIME_DIM};

use cgm_core::{Grid, Scalar};

/// Full-resolution conditioning maps shared by every injector site: the
/// measurement back-projection (1 channel) and the environment raster
/// (2 channels).
#[derive(Debug, Clone)]
pub struct PriorMaps<T> {
    pub backproj: Grid<T>,
    pub env: Grid<T>,
}

impl<T: Scalar> PriorMaps<T> {
    pub fn new(backproj: Grid<T>, env: Grid<T>) -> Self {
        PriorMaps { backproj, env }
    }
}

/// Per-call context passed to every block: the embedded step index and
/// the prior maps.
pub struct Aux<'a, T> {
    pub t_emb: &'a [T],
    pub priors: &'a PriorMaps<T>,
}
