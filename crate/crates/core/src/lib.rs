//! Preference chain core: behavior graph, similarity retrieval, path-weight
//! priors, language-model calibration, evaluation metrics, synthetic
//! populations and the mobility agent loop.
//!
//! `no_std` with `alloc`. File formats, HTTP providers and the command-line
//! tool live in the `prefchain` crate.
#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod calibration;
pub mod embedding;
pub mod graph;
pub mod metrics;
pub mod mobility;
pub mod pipeline;
pub mod preference;
pub mod retrieval;
pub mod rng;
pub mod schema;
pub mod synth;
