//! Multi-modal transformer that generates textual descriptions of retinal
//! images from gated visual features and attention-weighted diagnostic
//! keywords.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod keyword;
pub mod metrics;
pub mod model;
pub mod shape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod visual;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
