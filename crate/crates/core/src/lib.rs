//! Desk-scale open-vocabulary video instance segmentation.

pub mod assignment;
pub mod config;
pub mod embedding_alignment;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod heads;
pub mod model;
pub mod params;
pub mod plot;
pub mod posenc;
pub mod query_generator;
pub mod synthetic_world;
pub mod tensor;
pub mod train;
pub mod tracker;

pub use error::{Error, Result};
