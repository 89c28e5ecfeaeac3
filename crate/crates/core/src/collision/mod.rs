//! Discrete hard-sphere collision operator: kinematics, quadrature,
//! nonlinear and linearized operators, collision frequency and spectral
//! analysis.

mod angular;
mod frequency;
pub mod kinematics;
mod linearized;
pub mod spectral;
mod tensor;

pub use angular::AngularQuadrature;
pub use frequency::{angular_kernel, collision_frequency, collision_frequency_at, growth_bounds};
pub use kinematics::post_collision_velocities;
pub use linearized::LinearizedOperator;
pub use spectral::{estimate_spectral_gap, SpectralConfig, SpectralReport};
pub use tensor::{CollisionConfig, CollisionTensor, Event, Stencil};
