//! Spatio-temporal graph neural rough differential equations.
//!
//! Each node's series is interpolated into a continuous path, summarised
//! per sub-path by its log-signature, and fed as the control of a coupled
//! pair of neural rough differential equations: one per-node (temporal) and
//! one mixing nodes through a learned adjacency (spatial).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod logsig;
pub mod model;
pub mod path;
pub mod pipeline;
pub mod solver;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
