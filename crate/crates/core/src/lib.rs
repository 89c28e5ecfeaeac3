//! Linearized hard-sphere mixture kinetics on a discrete velocity grid.

pub mod collision;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod micromacro;
pub mod mixture;
pub mod scalar;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Params = mixture::MixtureParams<f64>;
pub type Grid = mixture::VelocityGrid<f64>;
pub type Field = mixture::SpeciesField<f64>;
pub type Basis = mixture::MacroBasis<f64>;
pub type Tensor = collision::CollisionTensor<f64>;
pub type LinOp = collision::LinearizedOperator<f64>;
