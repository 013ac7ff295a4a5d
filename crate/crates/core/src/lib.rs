//! Core numerics for channel gain map reconstruction: dense grids, a
//! counter-based deterministic RNG, differentiable primitive operations
//! (convolutions, pixel shuffle, channel concat) with explicit backward
//! functions, bit-exact grid/tensor file formats, named parameter storage,
//! and a byte ledger for saved-for-backward memory accounting.
//!
//! Everything here is dtype-generic over [`Scalar`] (`f32` for training,
//! `f64` for verification) and deterministic: the same inputs and seed
//! always produce bit-identical outputs.

pub mod error;
pub mod grid;
pub mod io;
pub mod ledger;
pub mod ops;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::Grid;
pub use io::{read_grid, read_grid_as, write_grid, DynGrid};
pub use ledger::{BytesGuard, Ledger, LedgerReport, LedgerTag};
pub use ops::conv::{conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, Pad};
pub use ops::shuffle::{concat_channels, pixel_shuffle, pixel_unshuffle, split_channels};
pub use params::{GradStore, ParamId, ParamStore};
pub use rng::CounterRng;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
