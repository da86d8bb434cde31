//! File formats, HTTP providers and command implementations for the
//! preference chain. The `prefchain` binary is a thin layer over
//! [`commands`].

pub mod commands;
pub mod config;
pub mod formats;
pub mod ingest;
pub mod providers;
pub mod snapshot;
