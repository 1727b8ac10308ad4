pub mod autograd;
pub mod cme;
pub mod config;
pub mod dataforge;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod frce;
pub mod gradcheck;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod run;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Mask, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
