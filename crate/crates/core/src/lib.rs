//! Prior-guided two-class latent class modeling for incomplete patient tables.
//!
//! The pipeline runs config validation and layout ([`config`], [`layout`]),
//! table encoding ([`ingest`]), prior elicitation ([`elicit`]), the
//! marginalized posterior ([`model`]), NUTS sampling ([`sampler`]),
//! convergence checks ([`diagnostics`]) and membership reporting ([`report`]).
//! [`simulate`] generates cohorts with known parameters.

pub mod cli;
pub mod cohort;
pub mod config;
pub mod diagnostics;
pub mod elicit;
pub mod ingest;
pub mod layout;
pub mod model;
pub mod report;
pub mod sampler;
pub mod simulate;
pub mod special;

pub use cohort::{Cohort, Record, StandardizationStats};
pub use config::{validate_config, ModelConfig, PriorSpec, ValidationReport};
pub use layout::{build_layout, ParameterLayout};
