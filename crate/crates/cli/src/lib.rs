//! Command-line front end: dataset synthesis, two-stage training,
//! generation with traces, evaluation and checkpoint persistence.

pub mod bundle;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod render;
