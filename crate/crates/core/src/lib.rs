pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod mel_decoder;
pub mod model;
pub mod nn;
pub mod pitch;
pub mod postnet;
pub mod signals;
pub mod trainer;
pub mod units;
pub mod visual;

pub use error::{Error, Result};
