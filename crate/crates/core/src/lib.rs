//! Counterfactual recurrent networks for estimating treatment effects over
//! time, together with the tumour-growth simulator used to benchmark them
//! and the comparison estimators (linear regression, marginal structural
//! models, recurrent marginal structural networks, a plain recurrent
//! predictor).
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode differentiation, gradient
//!   reversal, Adam, variational dropout, JSON checkpoints.
//! - [`sim`]: pharmacokinetic/pharmacodynamic tumour-growth simulator with
//!   diameter-driven treatment assignment and counterfactual branches.
//! - [`models`]: every estimator under comparison.
//! - [`train`]: encoder/decoder training, decoder windows, random search.
//! - [`eval`]: counterfactual RMSE, treatment/timing selection, balancing
//!   diagnostics, optimal-classifier verification.
//! - [`experiment`]: configuration, persistence and sweep orchestration
//!   used by the `crn` command-line tool.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod rng;
pub mod sim;
pub mod train;
