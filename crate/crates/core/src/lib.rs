pub mod biometric;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pgnn;
pub mod protoloss;
pub mod trainer;

pub use error::{Error, Result};
