pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod profiles;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
