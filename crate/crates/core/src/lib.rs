//! Count regression for weekly near-miss event data.
//!
//! Exposure-offset Poisson, zero-inflated Poisson (ZIP) and zero-inflated
//! generalized Poisson (ZIGP) components, finite mixtures of those over
//! latent driver groups estimated by EM, evaluation metrics, grouped
//! stratified cross-validation and a synthetic data generator with known
//! ground truth.

pub mod cv;
pub mod data;
pub mod em;
pub mod error;
pub mod fit;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pmf;
pub mod synth;

pub use data::{DriverWeek, Event, FeatureStats, FoldAssignment, ObservationTable, Target};
pub use error::{Error, Result};
pub use model::{ComponentParams, Family, InflationSpec, ThetaMode};
