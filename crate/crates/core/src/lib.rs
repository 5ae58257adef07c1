pub mod cli;
pub mod config;
pub mod degrade;
pub mod error;
pub mod image;
pub mod io;
pub mod kernel;
pub mod meta;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod zssr;

pub use error::{Error, Result};
