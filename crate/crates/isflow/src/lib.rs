//! Importance-sampling estimator for threshold-exceedance probabilities.
//!
//! A cheap reduced-order model is sampled to collect data near the event of
//! interest, the data are reweighted to discount the redundancy caused by the
//! model error, a flow-based generative model is fit to the weighted
//! empirical distribution, and the trained density drives an importance
//! sampling estimator corrected by the expensive fine model.
//!
//! Modules:
//! - [`flow_core`]: the invertible coupling-layer map with exact density.
//! - [`tape`]: reverse-mode differentiation used by training.
//! - [`mod@train`]: weighted cross entropy + score penalty, ADAM, minibatches.
//! - [`weighting`]: acceptance band and the half-normal weight system.
//! - [`elliptic`]: the 1D log-normal elliptic testbed (KL expansion, coarse
//!   and fine QoI evaluators).
//! - [`estimators`]: Monte Carlo / importance-sampling estimators, fidelity
//!   counts, analytic toy problems.
//! - [`cli`]: config-driven experiment pipeline and its artifacts.

// `!(x > 0.0)`-style guards intentionally reject NaN configuration values;
// the suggested `partial_cmp` rewrite would let them through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod elliptic;
pub mod estimators;
pub mod flow_core;
pub mod tape;
pub mod train;
pub mod weighting;

pub use flow_core::{build_model, FlowConfig, FlowModel, PartitionKind, PartitionScheme};
pub use train::{objective_and_gradient, train, Objective, TrainConfig};
pub use weighting::{accept, eps_max_neg, fit_weights, RawSample, WeightedDataset};
