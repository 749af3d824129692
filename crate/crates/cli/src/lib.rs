//! Library surface of the command-line pipeline, shared by the `niles`
//! binary and the acceptance harness.

pub mod commands;
pub mod config;
pub mod svg;
