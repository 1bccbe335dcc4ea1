//! Matrix autoregression with auxiliary vector covariates.
//!
//! A matrix-valued time series `X_t` (M x N, on a spatial grid) is forecast
//! from its own lags through bilinear maps `A_p X_{t-p} B_p'` and from an
//! exogenous vector series `z_t` through spatially smooth tensor
//! coefficients, with Kronecker-structured noise `vec(E_t) ~ N(0, Sigma_c
//! (x) Sigma_r)`. Estimation is penalized maximum likelihood with an RKHS
//! functional-norm penalty, solved by alternating minimization with exact
//! block updates; the smooth coefficients live either in the full
//! representer span of the kernel Gram matrix or in a truncated Mercer
//! eigenbasis for speed.
//!
//! The crate provides the estimator ([`estimator`]), lag selection by
//! AIC/BIC with effective degrees of freedom ([`selection`]), a joint
//! stationarity checker ([`stationarity`]), a synthetic-data generator
//! ([`simulator`]), competitor forecasters ([`baselines`]), and dataset
//! persistence ([`data_io`]).

pub mod baselines;
mod codec;
pub mod data_io;
pub mod error;
pub mod estimator;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod selection;
pub mod simulator;
pub mod stationarity;

pub use error::{MaracError, Result};
pub use estimator::{fit, tune_lambda, FitMode, FitOptions, FitReport, SigmaMode};
pub use kernels::{GridConfig, GridSpec, KernelContext, KernelSpec};
pub use linalg::{Mat, Tensor3, Vector};
pub use model::{AuxCoeffs, Forecaster, MaracModel, MatrixSeries};
pub use selection::{select_lags, SelectionResult, SelectOptions};
pub use simulator::{simulate, SimBundle, SimConfig};
pub use stationarity::{check_stationarity, StationarityVerdict};
