pub mod checkpoint;
pub mod cli;
pub mod datamodel;
pub mod degrade;
pub mod error;
pub mod evalkit;
pub mod ffsr;
pub mod masks;
pub mod nn;
pub mod rife;
pub mod trainer;

pub use error::{Error, Result};
