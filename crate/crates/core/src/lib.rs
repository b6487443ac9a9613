//! Single-shot object detection on a convolutional vision transformer backbone,
//! built on a small reverse-mode autodiff tensor library.

pub mod anchors;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod inference;
pub mod inspect;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::CvtAssd;
pub use tensor::Tensor;
