//! Adaptive rectangular convolution (ARConv) and the ARNet pansharpening
//! pipeline built on a small reverse-mode tensor library.

pub mod arconv;
pub mod arnet;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
