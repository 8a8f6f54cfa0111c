pub mod aggregation;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod search_space;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{LabelTensor, Tape, Tensor, Var};
