pub mod bank;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod consistency;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
mod io;
pub mod locmap;
pub mod model;
pub mod render;
pub mod seeds;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
