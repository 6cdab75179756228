pub mod autodiff;
pub mod checkpoint;
pub mod codebook;
pub mod data;
pub mod dual;
pub mod error;
pub mod experiment;
mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
