//! Core engine for interactive introspection of two-stream
//! vision-language transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`math`] – dense row-major matrices and the transformer primitives
//!   (softmax, scaled dot-product attention, layer norm, GELU).
//! * [`tokenizer`] – WordPiece tokenization with `[CLS]`/`[SEP]` framing.
//! * [`model`] – the two-stream engine: weight manifests, visual feature
//!   files, head enumeration and the attention-capturing forward pass.
//! * [`analytics`] – k-numbers, bucketing, head filtering, instance diffs
//!   and per-head dataset statistics.
//! * [`bias`] – corpus ingestion, answer-frequency head/tail partitions,
//!   bias flags and image ranking.
//! * [`ablate`] – batch head-pruning experiments.
//! * [`synth`] – deterministic synthetic vocabularies, features, corpora
//!   and weights for tests and demos.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root pin the 32-bit instantiation the service uses.

pub mod ablate;
pub mod analytics;
pub mod bias;
pub mod error;
mod gemm;
pub mod hash;
pub mod math;
pub mod model;
pub mod synth;
pub mod tokenizer;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use error::{Error, Result};

/// Floating point element type of matrices, weights and attention maps.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for constants and weight loading.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to float scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type Matrix32 = math::Matrix<f32>;
pub type Matrix64 = math::Matrix<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type ForwardResult32 = model::ForwardResult<f32>;
pub type AttentionMap32 = analytics::AttentionMap<f32>;
pub type InstanceDiff32 = analytics::InstanceDiff<f32>;
pub type CapturedState32 = analytics::CapturedState<f32>;
