//! Scaling-law laboratory for data-constrained training of autoregressive and
//! masked-diffusion language models.
//!
//! The numeric core ([`lawcore`], [`fitter`], [`frontier`], [`toytrain`]) is
//! generic over [`Scalar`]; the aliases below pin the common `f64` instances.

pub mod archcalc;
pub mod error;
pub mod fitter;
pub mod frontier;
pub mod lawcore;
pub mod optim;
pub mod runstore;
pub mod scalar;
pub mod toytrain;

pub use error::{Error, Result};
pub use fitter::{FitConfig, FitReport, TwoStageFit};
pub use lawcore::{Allocation, LawParams};
pub use runstore::{Family, ParetoPoint, RunRecord};
pub use scalar::Scalar;

pub type Law = LawParams<f64>;
pub type Law32 = LawParams<f32>;
