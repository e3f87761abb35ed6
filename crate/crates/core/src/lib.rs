pub mod algorithms;
pub mod autodiff;
pub mod config;
pub mod environments;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod operators;
pub mod qspace;
pub mod training;

pub use error::{Error, Result};
