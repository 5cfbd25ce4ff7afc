//! Continuous-field molecular modeling: direction/distance fields,
//! per-molecule sinusoidal neural fields, a transformer hypernetwork
//! trained as a diffusion denoiser over those fields, and recovery of
//! discrete molecules from generated fields.

pub mod diffusion;
pub mod error;
pub mod fieldgen;
pub mod fixtures;
pub mod geom;
pub mod hypernet;
pub mod mnf;
pub mod molio;
pub mod numeric;
pub mod params;
pub mod reconstruct;
pub mod tape;
pub mod trainer;
pub mod rng;

pub use error::{Error, Result};
