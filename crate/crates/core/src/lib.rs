//! Hard parameter sharing (HPS) for two-task and multi-task linear regression.
//!
//! The crate covers data generation, the HPS estimator and its baselines,
//! deterministic high-dimensional risk limits, regime classification and a
//! progressive training procedure. Numerical routines are generic over
//! [`Scalar`] (implemented for `f32` and `f64`); the `f64` aliases below are
//! what most callers want.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod freeaddition;
pub mod model;
pub mod montecarlo;
pub mod multitask;
pub mod progressive;
pub mod regimes;
pub mod rng;
pub mod roots;
pub mod scalar;
pub mod selfconsistent;

pub use error::{Error, Result};
pub use scalar::{lit, Scalar};

/// Dense matrix in the default precision.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense vector in the default precision.
pub type Vector = nalgebra::DVector<f64>;

pub type CovarianceSpec = model::CovarianceSpec<f64>;
pub type TaskSpec = model::TaskSpec<f64>;
pub type Dataset = model::Dataset<f64>;
pub type RandomEffectSpec = model::RandomEffectSpec<f64>;
pub type ShiftMatrix = model::ShiftMatrix<f64>;
pub type HpsSolution = estimators::HpsSolution<f64>;
pub type HpsProfile = estimators::HpsProfile<f64>;
pub type RiskReport = estimators::RiskReport<f64>;
pub type AlphaPair = selfconsistent::AlphaPair<f64>;
pub type AlphaDeriv = selfconsistent::AlphaDeriv<f64>;
pub type ModelShiftLimits = freeaddition::ModelShiftLimits<f64>;
pub type FTriplet = freeaddition::FTriplet<f64>;
pub type DeformedMpLimits = freeaddition::DeformedMpLimits<f64>;
pub type SampleSizes = model::SampleSizes<f64>;
pub type MultiTaskFit = multitask::MultiTaskFit<f64>;
pub type ProgressiveTrace = progressive::ProgressiveTrace<f64>;
