//! Tree-based model averaging of conditional average treatment effect (CATE)
//! models fitted at separate sites.
//!
//! Each site fits a local CATE model on its own subjects and exports only the
//! fitted model. The target site predicts every imported model on its own
//! estimation subjects, stacks the predictions into an augmented dataset with
//! the site index as a categorical predictor, and fits a tree or forest on it.
//! Evaluating that ensemble at the target's site index yields a model average
//! whose weights depend on `x`.

pub mod baselines;
pub mod causal;
pub mod ensemble;
pub mod error;
pub mod exchange;
pub mod exec;
pub mod rng;
pub mod simnet;
pub mod tree;

pub use error::{Error, Result};
pub use exec::Execution;
