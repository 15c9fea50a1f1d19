//! Coarse-to-fine residual optical flow for articulated human motion.
//!
//! * [`tensor`]: dense f32 tensors and hand-differentiated kernels
//! * [`model`]: the spatial-pyramid residual flow network and its checkpoint format
//! * [`synth`]: articulated capsule figures with exact ground-truth flow
//! * [`train`]: end-point-error loss, Adam and the training loop
//! * [`eval`] / [`bench`]: EPE statistics and inference latency
//! * [`io`]: `.flo`, PPM/PGM and color-wheel visualization
//! * [`gradcheck`]: finite-difference checks of every backward pass

pub mod bench;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod parallel;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{FlowField, Shape, Tensor};
