//! Infinite-width theory of Transformers at initialization, plus a
//! finite-width Monte-Carlo lab to check it.
//!
//! The crate has three layers:
//!
//! - [`arch`] and [`plan`]: architecture descriptions, parameter groups, and
//!   per-group width-scaling plans (initialization variances, SGD and AdamW
//!   learning-rate factors) along the neural-tangent ↔ maximal-update axis.
//! - [`kernel`], [`gaussian`], and [`ntk`]: the forward preactivation-kernel
//!   recursion, the Gaussian expectations it needs (activation pair integrals
//!   and self-attention moments), and the neural-tangent-kernel recursion.
//! - [`lab`]: finite-width models with exact forward passes and reverse-mode
//!   Jacobians, and Monte-Carlo estimators of kernels, NTKs, gradient
//!   magnitudes, and one-step update sizes.
//!
//! Everything in the theory layers is generic over the scalar type through
//! [`float::Float`]; the aliases below fix `f64`, which is also what the lab
//! uses throughout.

pub mod arch;
pub mod error;
pub mod float;
pub mod gaussian;
pub mod inputs;
pub mod kernel;
pub mod lab;
pub mod ntk;
pub mod plan;
pub mod rng;

pub use arch::{Activation, ArchSpec, BlockKind, Masking, Modality, ParamGroup, Pooling};
pub use inputs::Batch;
pub use error::{Error, Result};
pub use plan::{make_init_plan, make_lr_plan, make_plan, output_rescale, Optimizer, ScalingConstants, ScalingPlan, ScalingStrategy, StrategyKind};

/// Default scalar used by the command-line tools and the lab.
pub type Real = f64;

pub type PairKernel64 = kernel::PairKernel<f64>;
pub type KernelTrace64 = kernel::KernelTrace<f64>;
pub type ScalingPlan64 = plan::ScalingPlan<f64>;
pub type NtkTrace64 = ntk::NtkTrace<f64>;
pub type AttnMoments64 = gaussian::AttnMoments<f64>;
