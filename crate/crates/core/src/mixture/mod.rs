//! Mixture parameters, velocity grid, weighted inner product and the
//! collision-invariant basis.

mod basis;
mod field;
mod grid;
mod params;

pub use basis::{
    build_basis, ell_coefficients, equilibrium, gram, log_equilibrium, log_maxwellian, maxwellian,
    sqrt_equilibrium, FluidState, MacroBasis,
};
pub use field::{dot, inner_product, norm, weighted_norm, SpeciesField};
pub use grid::VelocityGrid;
pub use params::{MixtureParams, MixtureSpec};
