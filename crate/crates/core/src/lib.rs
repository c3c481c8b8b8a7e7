pub mod data_io;
pub mod error;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
