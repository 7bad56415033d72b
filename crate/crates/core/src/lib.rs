//! Flow-based sampling of Boltzmann distributions, validated against an
//! independently computed Moser transport map.
//!
//! The pipeline: closed-form molecular [`potential`]s and their
//! high-energy regularization, reference data from overdamped
//! [`langevin`] dynamics, a RealNVP [`flow`] trained by negative log
//! likelihood, and validation through the Neumann-Poisson [`pde`] solver,
//! the [`moser`] transport map and Wasserstein-2 [`metrics`].

pub mod cli;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod grid;
pub mod io;
pub mod langevin;
pub mod metrics;
pub mod mixture;
pub mod moser;
pub mod pde;
pub mod potential;
pub mod rng;
pub mod samples;
pub mod table;

pub use error::{Error, Result};
pub use grid::{BoxDomain, UniformGrid};
pub use potential::{Energy, GridDensity, PotentialSpec, RegularizedPotential};
pub use samples::{Provenance, SampleSet};

/// Version tag written into every artifact file.
pub const SCHEMA_VERSION: u32 = 1;
