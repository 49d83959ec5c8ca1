//! Unsupervised detection of topological order from ensembles of neural-network
//! quantum states.
//!
//! The pipeline represents low-energy states of the toric code with a quasi-local
//! RBM ansatz ([`rbm`]), optimizes sector representatives with variational Monte
//! Carlo ([`vmc`]), samples Boltzmann-weighted ensembles of network parameters
//! ([`ensemble`]), compares them with gauge-invariant similarity measures
//! ([`similarity`]) and counts superselection sectors with diffusion maps
//! ([`diffmap`]). [`experiment`] wires the stages together with persistence.
//!
//! Numerical code is generic over [`Real`] (`f32`/`f64`); the aliases below fix
//! the double-precision types used by the experiment pipeline.

pub mod diffmap;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod hamiltonian;
pub mod lattice;
pub mod persist;
pub mod rbm;
pub mod scalar;
pub mod similarity;
pub mod vmc;

pub use error::{Error, Result};
pub use lattice::{Direction, Lattice, LoopPath};
pub use rbm::{Amplitude, GaugeTransform, Phase, SpinConfig};
pub use scalar::Real;

pub type RbmParams = rbm::RbmParams<f64>;
pub type RbmParams32 = rbm::RbmParams<f32>;
pub type ToricParams = hamiltonian::ToricParams<f64>;
pub type McEstimate = vmc::McEstimate<f64>;
pub type SimilarityMatrix = similarity::SimilarityMatrix<f64>;
pub type DiffusionResult = diffmap::DiffusionResult<f64>;
pub type Ensemble = ensemble::Ensemble<f64>;
