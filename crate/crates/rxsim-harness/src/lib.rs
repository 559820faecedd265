//! Experiment harness for the receive-path simulator: config files, packaged
//! experiments with CSV/SVG output, and the CLI plumbing.

pub mod config;
pub mod experiments;
pub mod plot;
