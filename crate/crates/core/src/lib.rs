pub mod data;
pub mod encoder;
pub mod evalkit;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod masking;
pub mod mibtrl;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
