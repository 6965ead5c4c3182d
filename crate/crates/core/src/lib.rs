pub mod checkpoint;
pub mod config;
pub mod connectivity;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod landscape;
pub mod nn;
pub mod rng;

pub use error::{FlmcError, Result};
