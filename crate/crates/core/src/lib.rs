//! Line-streaming hyperspectral denoising with a fault-tolerant mixture of
//! state-space denoisers.

pub mod autodiff;
pub mod codec;
pub mod cube;
pub mod denoiser;
pub mod error;
pub mod fault;
pub mod gradcheck;
pub mod metrics;
pub mod mixture;
pub mod noise;
pub mod nn;
pub mod params;
pub mod power;
pub mod ssm;
pub mod study;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
