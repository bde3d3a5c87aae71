//! Numerical laboratory for the stability of the sharp Hausdorff-Young functional
//! over indicator-majorized functions `f e^{ig} 1_E`.
//!
//! Fourier convention: `f^(xi) = int f(x) e^{-2 pi i x.xi} dx`.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fit;
pub mod functional;
pub mod interp;
pub mod kernels;
pub mod optimize;
pub mod piecewise;
pub mod radial_fourier;
pub mod report;
pub mod special;
pub mod spectral;
pub mod stability;
pub mod taylor;

pub use error::{LabError, Result};
