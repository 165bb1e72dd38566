//! Two-stage conditional normalizing flows for grid land-use planning.
//!
//! Stage one ([`zone_flow`]) models a coarse functional-zone map conditioned on
//! an urban information vector. The [`fusion`] module turns a zone map into a
//! per-zone embedding, and stage two ([`config_flow`]) models per-cell POI
//! counts conditioned on an attention summary of that embedding.

pub mod config_flow;
pub mod error;
pub mod flow_layers;
pub mod fusion;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod synthdata;
pub mod zone_flow;

pub use error::{Error, Result};
