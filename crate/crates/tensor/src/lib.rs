//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! The engine covers exactly the operator set the EHDR network needs:
//! 2-D convolution, modulated deformable convolution, bilinear resampling,
//! channel/batch plumbing and a handful of elementwise maps. Everything is
//! generic over [`Scalar`], so the same graph code runs in `f32` for
//! training and in `f64` for finite-difference gradient verification.

mod conv;
mod deform;
mod error;
pub mod gradcheck;
pub mod io;
mod params;
mod resample;
mod scalar;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use deform::bilinear_sample;
pub use error::{Result, TensorError};
pub use params::{Bindings, Init, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
