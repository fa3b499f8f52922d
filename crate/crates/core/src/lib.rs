//! Unsupervised inter-frame motion correction for dynamic PET series.

pub mod activation;
pub mod autodiff;
pub mod classify;
pub mod config;
pub mod conv;
pub mod convlstm;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod net;
pub mod params;
pub mod patlak;
pub mod phantom;
pub mod pipeline;
pub mod pool;
pub mod series;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;
