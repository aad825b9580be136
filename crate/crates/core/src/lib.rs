pub mod analysis;
pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
