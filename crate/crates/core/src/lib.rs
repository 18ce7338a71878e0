//! Inference of origin-destination flows between regions from aggregate
//! per-region count panels.
//!
//! The crate implements a penalized multinomial likelihood over hour-to-hour
//! flow tensors, two fitting procedures built on it (an alternating "exact"
//! maximization and a decoupled "approximate" one), a synthetic data
//! generator with known ground truth, population scaling helpers and the
//! evaluation metrics used to compare fitted flows against truth.
//!
//! Layout:
//! - [`geo`]: regions, distances and neighbor sets under a travel cutoff.
//! - [`flow`]: count panels and sparse flow tensors.
//! - [`likelihood`]: transition kernel, log-likelihood and its gradient.
//! - [`optim`]: box-constrained quasi-Newton and bounded scalar minimizers.
//! - [`exact`]: the alternating maximization over flows, departure
//!   probabilities and gathering scores.
//! - [`approx`]: the inbound/outbound/stayer decomposition and M recovery.
//! - [`simulator`]: multinomial movement simulator and benchmark scenarios.
//! - [`scaling`]: population scaling with penalty-weight compensation.
//! - [`metrics`]: NAE, stability statistics and inbound/outbound totals.

pub mod approx;
mod curvature;
pub mod error;
pub mod exact;
pub mod flow;
pub mod geo;
pub mod likelihood;
pub mod metrics;
pub mod optim;
pub mod scaling;
pub mod simulator;
mod sum;

pub use error::{Error, Result};
pub use flow::{CountPanel, FlowTensor};
pub use geo::{build_distance_matrix, neighbor_sets, DistanceMatrix, NeighborSets, RegionSet};
pub use likelihood::{LikelihoodBreakdown, ModelParams};

/// Floor applied to active flows wherever `log M` is evaluated, and the lower
/// bound handed to the flow optimizer.
pub const M_MIN: f64 = 1e-12;

/// Upper clamp for departure probabilities.
pub const PI_MAX: f64 = 1.0 - 1e-9;
