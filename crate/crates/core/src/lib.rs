//! Neural Koopman forecasting of longitudinal cognitive scores.

pub mod analysis;
pub mod dataset;
pub mod edmd;
pub mod error;
pub mod model;
pub mod numerics;
pub mod par;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
