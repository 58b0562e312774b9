pub mod autodiff;
pub mod bayes;
pub mod checkpoint;
pub mod episode;
pub mod error;
pub mod eval;
pub mod flow;
pub mod missingness;
pub mod optim;
pub mod params;
pub mod pfn;
pub mod scalar;
pub mod scm;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type PfnModel64 = pfn::PfnModel<f64>;
pub type PfnModel32 = pfn::PfnModel<f32>;
pub type OptimizerState64 = optim::OptimizerState<f64>;
pub type OptimizerState32 = optim::OptimizerState<f32>;
