//! Bayesian list-wise alignment with dynamic quantile estimation.
//!
//! The crate runs the whole alignment pipeline on a tabular autoregressive
//! list policy over a synthetic recommendation world:
//!
//! - [`envsim`]: deterministic catalogs, user contexts and target sets.
//! - [`metrics`]: Recall@k, NDCG@k, MGU, ILD and the composite rewards.
//! - [`policy`]: the masked autoregressive list policy with exact gradients.
//! - [`estimator`]: static and Beta-posterior quantile estimators, proxy reward.
//! - [`bon`]: Best-of-N selection, the exact BoN law and the static vBoN terms.
//! - [`grpo`]: group advantages, the clipped surrogate and the training loop.
//! - [`experiment`]: config-driven runs behind the `blade` command line tool.

pub mod bon;
pub mod envsim;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod grpo;
pub mod metrics;
pub mod policy;

pub use error::{Error, Result};

/// Catalog item identifier.
pub type ItemId = usize;
