//! Workbench around `pasta-core`: experiment configuration, dataset
//! ingestion, run manifests, and the command drivers the `pasta` binary
//! dispatches to.

pub mod config;
pub mod data_io;
pub mod drivers;
pub mod manifest;
