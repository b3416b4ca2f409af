//! Label-driven deformable registration of 3D volumes with an adversarial
//! deformation prior.
//!
//! The crate is organised bottom-up: [`volume`] and [`io`] provide grids and
//! files, [`transform`] the geometry, [`losses`] every scalar objective,
//! [`nn`] and [`networks`] the two parametric models, [`sim`] the synthetic
//! motion prior and phantom data, [`training`] the alternating optimiser and
//! [`eval`] the evaluation protocol.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod networks;
pub mod rng;
pub mod sim;
pub mod training;
pub mod nn;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
