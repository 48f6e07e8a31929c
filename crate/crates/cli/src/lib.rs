//! Command-line driver for the compression pipeline: train a teacher on
//! synthetic gratings, compress it into a weight-shared student, distill,
//! and inspect the result.
//!
//! - [`config`]: the TOML run configuration and its overrides.
//! - [`synth`]: the on-the-fly gratings dataset.
//! - [`checkpoint`]: the binary model format.
//! - [`pipeline`]: the phases as library calls.
//! - [`output`]: CSV/JSON rendering and all-or-nothing file output.

pub mod checkpoint;
mod commands;
pub mod config;
pub mod output;
pub mod pipeline;
pub mod synth;

pub use commands::run;
