//! Differentiable primitive operations. Every forward has an explicit
//! paired backward producing exact vector-Jacobian products; there is no
//! computation-graph autodiff.

pub mod conv;
pub mod shuffle;
