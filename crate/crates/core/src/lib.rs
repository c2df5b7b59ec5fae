//! Simulation and analysis of hierarchical federated learning with mobile users.
//!
//! Users train locally, edge access points aggregate the models of the users
//! they serve every `kappa1` local steps, and a cloud server aggregates the
//! edge models every `kappa2` edge rounds. Users roam between edge APs along a
//! Markov chain. Two training algorithms are provided:
//!
//! * [`fedcore::Algorithm::Hfl`]: conventional hierarchical FL in which a user
//!   can only upload to the AP it downloaded from.
//! * [`fedcore::Algorithm::Macfl`]: mobility-aware cluster FL, where users
//!   upload wherever they end up, take first-order meta-gradient steps, and
//!   models are combined with cosine-similarity attention weights.
//!
//! [`analysis`] evaluates the closed-form convergence bounds of both schemes
//! and estimates the constants those bounds depend on.

pub mod analysis;
pub mod datasets;
pub mod error;
pub mod fedcore;
pub mod harness;
pub mod mobility;
pub mod models;
pub mod rng;

pub use error::{Error, Result};
