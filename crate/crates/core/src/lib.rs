pub mod autograd;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod dcae;
pub mod dit;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod run;
pub mod model;
pub mod sampler;
pub mod suites;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
