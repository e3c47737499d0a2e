//! Spatially augmented Bayesian synthetic control.
//!
//! Donor weights are a centred softmax of latent logits whose prior mean
//! decreases with distance to the treated unit. The posterior over logits and
//! scales is sampled with [`hmc`], and counterfactuals are drawn from the
//! posterior predictive.

pub mod hmc;
mod model;
mod predictive;

pub use hmc::{ChainDraws, HmcConfig, LogDensity};
pub use model::{softmax_centered, DistanceScale, Prior, SascData, SascModel, SascParams};
pub use predictive::{
    aggregate_rrt, fit_sasc, posterior_predictive, rr_summary, sample_posterior, DaySummary, Diagnostics, PosteriorDraws,
    RrSummary, SascFit,
};
