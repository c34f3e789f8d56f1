//! Realized GARCH-Itô volatility toolkit.
//!
//! * [`model`]: parameter vectors, the structural-to-GARCH map and the
//!   conditional volatility recursion.
//! * [`simulator`]: Euler paths of the jump-diffusion with noisy ticks.
//! * [`realized`]: noise-robust realized variance, jump detection and jump
//!   variation from tick data.
//! * [`options`]: option-portfolio spot variance estimate.
//! * [`qmle`]: quasi-likelihoods, their maximization and sandwich errors.
//! * [`forecast`]: one-step prediction and rolling backtests.
//! * [`pipeline`], [`io`], [`config`], [`mc`]: file formats and batch runs.
//!
//! The numerical core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix it to the precisions used by the pipeline.

pub mod config;
pub mod error;
pub mod forecast;
pub mod io;
pub mod mc;
pub mod model;
pub mod optim;
pub mod options;
pub mod pipeline;
pub mod qmle;
pub mod realized;
pub mod scalar;
pub mod simulator;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type StructuralParamsF64 = model::StructuralParams<f64>;
pub type JumpParamsF64 = model::JumpParams<f64>;
pub type GarchParamsF64 = model::GarchParams<f64>;
pub type OptionLinkParamsF64 = model::OptionLinkParams<f64>;
pub type FullParamsF64 = model::FullParams<f64>;
pub type TickDayF64 = realized::TickDay<f64>;
pub type DailyMeasuresF64 = realized::DailyMeasures<f64>;
pub type EstimationInputF64 = qmle::EstimationInput<f64>;

pub type GarchParamsF32 = model::GarchParams<f32>;
pub type JumpParamsF32 = model::JumpParams<f32>;
pub type TickDayF32 = realized::TickDay<f32>;
pub type EstimationInputF32 = qmle::EstimationInput<f32>;
