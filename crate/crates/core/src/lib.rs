//! Heterogeneous treatment effect estimation.
//!
//! The crate covers the whole estimation pipeline for a binary treatment:
//! ingestion and standardization ([`data`]), base learners and
//! cross-validation ([`learners`]), LASSO feature screening ([`screening`]),
//! T-learner and doubly-robust meta-learners ([`meta`]), three Bayesian causal
//! models ([`bayes`]), nested cross-validation and bootstrap inference
//! ([`inference`]), permutation-importance heterogeneity analysis
//! ([`heterogeneity`]) and synthetic processes with known effects
//! ([`synthetic`]).

pub mod bayes;
pub mod data;
pub mod error;
pub mod heterogeneity;
pub mod inference;
pub mod learners;
pub mod meta;
pub mod rng;
pub mod screening;
pub mod synthetic;

mod par;

pub use data::{Column, ColumnKind, ColumnRoles, Dataset};
pub use error::{Error, Result};
