//! Content-aware inter-scale cost aggregation (CAIS) for stereo cost volumes.
//!
//! The crate covers the whole desk-scale pipeline: guidance generation from
//! fine/coarse feature pairs with explicit spatial-relationship encoding,
//! on-the-fly 3D weight construction from stereo 2D guidance, the decomposed
//! 1D-disparity + 2D-spatial upsampling of cost volumes, a full-3D reference
//! path, fixed-weight baselines, manual backward passes, FLOP accounting and
//! a synthetic-stereo training harness.

pub mod aggregate;
pub mod guidance;
pub mod harness;
pub mod instrument;
pub mod tensor;

use std::fmt::Debug;

/// Scalar type for the numeric kernels. Production runs `f32`; gradient
/// checking runs the same code in `f64`.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }
    fn from_usize_(v: usize) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
