//! Discrete nonlocal perimeters on uniform grids.
// `!(x > 0.0)` rejects NaN on purpose; axis loops index several arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod energy;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod grid;
pub mod gridgeom;
pub mod kernels;
pub mod mincut;
pub mod numeric;
pub mod stability;

pub use error::{Error, Result};
pub use grid::{DomainKind, DomainMask, Grid, GridSet};
pub use kernels::{build_weights, FamilyKind, InteractionWeights, KStar, Kernel, KernelSpec};
