//! Multiscale multiview vision transformer: tensor core, audio/image
//! front-ends, model, augmentations, weight transfer, and a desk-scale
//! training kit. CPU only, no unsafe, deterministic given a seed.

pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transfer;

pub mod attention;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod frontend;
pub mod gradcheck;
pub mod model;
pub mod params;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorError, Var};
