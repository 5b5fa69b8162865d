//! Finite-width lab: concrete Transformers at initialization, exact forward
//! passes and reverse-mode Jacobians, and Monte-Carlo estimators of the
//! quantities the infinite-width theory predicts.

pub mod backward;
pub mod forward;
pub mod mc;
pub mod params;

pub use backward::{backward, materialize, ntk_dot, output_jacobian, site_grams, BackParts, GradSet, NtkDot, OutputComponent, OutputSeed, SiteGrams};
pub use forward::{forward_pass, BlockTrace, ForwardTrace, MhsaTrace};
pub use mc::{
    empirical_kernel, empirical_ntk, grad_magnitude_stats, ln_backward_empirical, norm_fluctuation_moments,
    one_step_probe, qk_logit_samples, AdamWConfig, FluctuationMoments, GradMagnitudes, KernelEstimate, LrFactors,
    McSummary, NtkEstimate, ProbeStats,
};
pub use params::{init_model, BlockParams, HeadParams, InitDist, MhsaParams, MlpParams, ModelParams};
