pub mod autograd;
pub mod complexity;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
