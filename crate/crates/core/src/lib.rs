//! Reuse Attention and friends.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] holds a small dense tensor type and the deterministic kernels
//!   (matmul, row softmax, depthwise and strided convolution, linear) used by
//!   everything else, together with a finite-difference gradient oracle.
//! * [`traffic`] is the optional recorder the kernels report logical memory
//!   movement to, phase by phase.
//! * [`attention`] implements Reuse Attention (one shared attention matrix,
//!   multi-scale depthwise-convolved value heads) and the multi-head,
//!   grouped-query and multi-query baselines.
//! * [`memory`] is the closed-form traffic / FLOP / roofline model plus the
//!   model and device catalogs.
//! * [`backbone`] is a toy-scale UniForm network built from Reuse Attention
//!   blocks, with parameter/FLOP counters and a weight container.
//! * [`verify`] bundles the cross-module property suites behind one call.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common double-precision instantiations.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod memory;
pub mod scalar;
pub mod tensor;
pub mod traffic;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use traffic::{PhaseCount, PhaseScope, TrafficRecorder};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type AttentionConfig64 = attention::AttentionConfig<f64>;
pub type AttentionParams64 = attention::AttentionParams<f64>;
pub type UniFormModel64 = backbone::UniFormModel<f64>;
pub type UniFormModel32 = backbone::UniFormModel<f32>;
