//! Library surface of the pipeline driver; the `refdiff` binary is a thin
//! argument parser over these modules, and the acceptance suite drives them
//! directly.

pub mod commands;
pub mod config;
