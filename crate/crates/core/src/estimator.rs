//! Reward-quantile estimation.
//!
//! The CDF of the reference reward distribution at a threshold `r` is treated
//! as an unknown probability with a Beta prior whose pseudo-counts are the
//! reference samples strictly below / not below `r`. The current group of
//! rollouts is folded in as binomial evidence raised to the power `tau`, so
//! the posterior mean is
//!
//! ```text
//! F(r) = (N_ref(<r) + tau * N_batch(<r)) / (M + tau * G)
//! ```
//!
//! `tau = 0` is the static empirical CDF of the reference set and `tau = 1`
//! pools the reference and batch samples. All counts are strict.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Sorted rewards of the `M` frozen-policy rollouts for one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub context_id: usize,
    sorted_rewards: Vec<f64>,
}

impl ReferenceStats {
    pub fn new(context_id: usize, mut rewards: Vec<f64>) -> Result<Self> {
        if rewards.is_empty() {
            return param("reference set must not be empty");
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reference reward".into()));
        }
        rewards.sort_by(f64::total_cmp);
        Ok(Self {
            context_id,
            sorted_rewards: rewards,
        })
    }

    pub fn sorted_rewards(&self) -> &[f64] {
        &self.sorted_rewards
    }

    /// Reference set size `M`.
    pub fn len(&self) -> usize {
        self.sorted_rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_rewards.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self
            .sorted_rewards
            .last()
            .expect("non-empty by construction")
    }
}

/// Sorts a copy of `rewards` into reference statistics for context 0.
pub fn build_reference(rewards: &[f64]) -> Result<ReferenceStats> {
    ReferenceStats::new(0, rewards.to_vec())
}

/// Number of reference rewards strictly below `r`.
pub fn count_below(stats: &ReferenceStats, r: f64) -> usize {
    stats.sorted_rewards.partition_point(|&x| x < r)
}

/// Number of group rewards strictly below `r`.
pub fn batch_count_below(group_rewards: &[f64], r: f64) -> usize {
    group_rewards.iter().filter(|&&x| x < r).count()
}

/// Estimator hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicConfig {
    pub tau: f64,
    pub bon_n: u32,
    /// Floor applied to the CDF before taking its log. `None` selects
    /// [`default_cdf_floor`].
    pub cdf_floor: Option<f64>,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            bon_n: 4,
            cdf_floor: None,
        }
    }
}

impl DynamicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return param(format!("tau must be finite and >= 0, got {}", self.tau));
        }
        if self.bon_n < 2 {
            return param(format!("bon_n must be >= 2, got {}", self.bon_n));
        }
        if let Some(f) = self.cdf_floor {
            if !(f > 0.0 && f < 1.0) {
                return param(format!("cdf_floor must be in (0, 1), got {f}"));
            }
        }
        Ok(())
    }

    pub fn floor_for(&self, m: usize, g: usize) -> f64 {
        self.cdf_floor
            .unwrap_or_else(|| default_cdf_floor(m as f64 + self.tau * g as f64))
    }
}

/// Half a pooled sample: `1 / (2 * effective_count)`.
pub fn default_cdf_floor(effective_count: f64) -> f64 {
    0.5 / effective_count
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPosterior {
    pub alpha: f64,
    /// Concentration `alpha + beta`, kept as computed so the mean is exactly
    /// the count ratio.
    pub total: f64,
}

impl BetaPosterior {
    pub fn beta(&self) -> f64 {
        self.total - self.alpha
    }

    pub fn mean(&self) -> f64 {
        self.alpha / self.total
    }
}

/// Beta posterior over the CDF at `r`: prior from the reference counts,
/// batch evidence tempered by `tau`.
pub fn posterior(stats: &ReferenceStats, group_rewards: &[f64], tau: f64, r: f64) -> BetaPosterior {
    let m = stats.len() as f64;
    let g = group_rewards.len() as f64;
    let n_ref = count_below(stats, r) as f64;
    let n_batch = batch_count_below(group_rewards, r) as f64;
    BetaPosterior {
        alpha: n_ref + tau * n_batch,
        total: m + tau * g,
    }
}

/// Posterior-mean CDF estimate at `r`.
pub fn blade_cdf(stats: &ReferenceStats, group_rewards: &[f64], tau: f64, r: f64) -> f64 {
    posterior(stats, group_rewards, tau, r).mean()
}

/// Batch-only CDF estimate `N_batch(<r) / G`, with no reference prior.
pub fn batch_cdf(group_rewards: &[f64], r: f64) -> f64 {
    batch_count_below(group_rewards, r) as f64 / group_rewards.len() as f64
}

/// `(N - 1) * log(max(fhat, cdf_floor))`; zero exactly when `fhat == 1`.
pub fn proxy_reward(fhat: f64, bon_n: u32, cdf_floor: f64) -> f64 {
    (f64::from(bon_n) - 1.0) * fhat.max(cdf_floor).ln()
}

/// Whether the static estimator assigns the same saturated quantile to two
/// rewards that both exceed the reference maximum. Requires
/// `r1 > r2 > max(reference)`.
pub fn indiscrimination_witness(stats: &ReferenceStats, r1: f64, r2: f64) -> Result<bool> {
    if !(r1 > r2 && r2 > stats.max()) {
        return param(format!(
            "need r1 > r2 > reference max {}, got r1={r1}, r2={r2}",
            stats.max()
        ));
    }
    let f1 = blade_cdf(stats, &[], 0.0, r1);
    let f2 = blade_cdf(stats, &[], 0.0, r2);
    Ok(f1 == 1.0 && f2 == 1.0)
}
