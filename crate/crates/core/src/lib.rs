pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod layers;
pub mod model;
pub mod params;
pub mod placement;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
