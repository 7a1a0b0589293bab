//! Numerically stable parameterizations of Normal-distribution scales for
//! VAE training.
//!
//! The crate provides reduced-precision emulation of the underflow behavior
//! behind the classic `log(exp(p))` failure, the family of scale
//! parameterizations that avoid it (identity log-scale, linear growth,
//! upper/lower/two-sided bounds), a KL divergence computed through the
//! log-scale so tiny scales never reach a logarithm, NaN-safe piecewise
//! kernels, a small manually differentiated MLP/VAE stack, streaming
//! training-instability metrics, and the `stable-gauss` experiment CLI on
//! top of it all.

pub mod cli;
pub mod data;
pub mod gaussian;
pub mod nn;
pub mod precision;
pub mod rng;
pub mod safemask;
pub mod scaleparam;
pub mod stability;
pub mod vae;

pub use gaussian::{kl, kl_vs_standard_prior, log_prob, mc_kl_estimate, optimal_gamma, DiagGaussian};
pub use precision::{min_finite_log_quotient, q_op, round_to, FloatMode, QuotientVariant};
pub use safemask::PiecewiseSpec;
pub use scaleparam::ScaleParam;
pub use stability::{InstabilityTracker, RunSummary};
pub use vae::{run_training, DecodedMode, MeanActivation, VaeConfig, VaeModel};
