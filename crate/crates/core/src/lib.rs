//! Simulation and analysis toolkit for a boundary-driven energy exchange
//! model on lattice domains and its packet dual.

pub mod config;
pub mod dual;
pub mod error;
pub mod forward;
pub mod harmonic;
pub mod lattice;
pub mod replicas;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};
pub use lattice::{BoundaryTemperature, DomainSpec, LatticeDomain};
pub use replicas::Execution;
