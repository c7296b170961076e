//! File formats, experiment harness and command-line front end for
//! [`gpoe_core`].

mod binary;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fs;
pub mod fusedemo;
pub mod report;
pub mod settings;
pub mod sweep;

pub use error::{Error, Result};
