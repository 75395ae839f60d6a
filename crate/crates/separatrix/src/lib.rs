//! Averaging for one-frequency slow-fast Hamiltonian systems that cross a
//! figure-eight separatrix: separatrix fluxes and capture probabilities,
//! the glued averaged flow, full perturbed simulations with capture
//! classification, and Monte Carlo verification at desk scale.

pub mod averaged;
pub mod cli;
pub mod ensemble;
pub mod error;
pub mod geometry;
mod interp;
pub mod model;
pub mod ode;
pub mod params;
pub mod sim;
pub mod theta;

pub use error::{Error, Result};
pub use model::{ModelPreset, System};
pub use params::NumericParams;
