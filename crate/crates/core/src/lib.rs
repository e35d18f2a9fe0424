pub mod assignment;
pub mod autograd;
pub mod betax;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
