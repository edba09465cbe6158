//! Toy vision-language-action policies with pluggable 3D geometric fusion.

pub mod autograd;
pub mod backbones;
pub mod bench;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod threedmix;

pub use error::{Error, Result};
pub use params::{Param, ParamStore};
pub use rng::RngStream;
pub use tensor::Tensor;
