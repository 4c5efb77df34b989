pub mod autodiff;
pub mod data;
pub mod density;
pub mod error;
pub mod experiment;
pub mod flows;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod tpp;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
