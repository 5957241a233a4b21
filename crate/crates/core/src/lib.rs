//! Simulation and verification toolkit for Markov-Feller operators:
//! evolves finite-support probability measures under iterated-function
//! -system and jump-flow dynamics, computes bounded-Lipschitz
//! (Fortet-Mourier) distances exactly, reconstructs coupling
//! decompositions on exact finite-state chains, and estimates
//! invariant-measure and asymptotic-stability criteria empirically.

pub mod coupling;
pub mod criteria;
pub mod error;
pub mod geometry;
pub mod measure;
pub mod rng;
pub mod semigroup;
pub mod system;
pub mod transport;
pub mod util;

pub use error::{CoreError, Result};
