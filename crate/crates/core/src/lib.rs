//! Synthetic control estimators for heatwave health effects under spatial
//! interference.
//!
//! The crate covers the full study pipeline:
//!
//! * [`panel`]: balanced unit-by-day panels and rate preprocessing,
//! * [`geo`]: distances, kernel weight matrices, contiguity and separation,
//! * [`exposure`]: percentile heatwave detection and treatment masks,
//! * [`donor`]: standard and spatially buffered donor pools, covariate screening,
//! * [`sc`]: simplex-constrained synthetic control and relative risks,
//! * [`sasc`]: the spatially augmented Bayesian synthetic control and its HMC sampler,
//! * [`simgen`]: the spatial interactive-fixed-effects Monte Carlo generator,
//! * [`evalx`]: imputation metrics, DerSimonian–Laird pooling and scenario tables,
//! * [`pipeline`]: seeded end-to-end simulation studies.

pub mod donor;
pub mod error;
pub mod evalx;
pub mod exposure;
pub mod geo;
pub mod io;
pub mod panel;
pub mod pipeline;
pub mod sasc;
pub mod sc;
pub mod simgen;
pub mod stats;

pub use error::{Error, Result};
