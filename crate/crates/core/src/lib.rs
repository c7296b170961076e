#![no_std]

extern crate alloc;

pub mod data;
pub mod distributions;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
