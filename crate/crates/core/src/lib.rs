//! Elastic embedding models: one transformer encoder whose nested depth and
//! width sub-networks each yield usable, truncatable embeddings.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod optim;
pub mod persistence;
pub mod smae;
pub mod srl;
pub mod subnetworks;

pub use error::{CheckpointError, Error, Result};
