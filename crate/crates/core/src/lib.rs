pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod experts;
pub mod flexdata;
pub mod model;
pub mod numerics;
pub mod params;
pub mod report;
pub mod routing;
pub mod scenarios;
pub mod spectra;
pub mod trainer;

pub use error::{Error, Result};
