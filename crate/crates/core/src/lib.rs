pub mod bessel;
pub mod bootstrap;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod geo;
pub mod io;
pub mod kriging;
pub mod optimize;
pub mod pipeline;
pub mod rng;
pub mod sfh;
pub mod simulate;
pub mod survey;
pub mod variogram;

pub use error::{Error, Result};
