pub mod aligner;
pub mod archive;
pub mod autodiff;
pub mod datagen;
pub mod backbone;
pub mod encoders;
pub mod evalsuite;
pub mod gradcheck;
pub mod error;
pub mod image;
pub mod nn;
pub mod prompting;
pub mod recipe;
pub mod runtime;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{PlvmError, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;
