//! Cloud-gap reconstruction for multispectral time series with a
//! time-series vision transformer fed by optical and radar frames.

pub mod cloudsim;
pub mod dataio;
pub mod evalmetrics;
pub mod error;
pub mod gradsuite;
pub mod objective;
pub mod render;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
