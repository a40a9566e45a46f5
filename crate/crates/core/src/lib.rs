pub mod acceptance;
pub mod autodiff;
pub mod budget;
pub mod data;
pub mod envs;
pub mod eval;
pub mod error;
pub mod exec;
pub mod nn;
pub mod policies;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
