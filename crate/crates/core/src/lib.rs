//! Coarse-to-fine tissue mask translation and mask-to-RGB synthesis for
//! histopathology, with the data preparation and distribution metrics needed
//! to train and evaluate the models.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod infer;
pub mod losses;
pub mod mask;
pub mod nets;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::{BinaryMask, StructuringElement};
pub use tensor::Tensor;
