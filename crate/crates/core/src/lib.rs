pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kan;
pub mod linalg;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod scan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Element, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
