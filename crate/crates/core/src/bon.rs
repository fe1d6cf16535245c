//! Best-of-N selection and the static BoN alignment baseline.

use crate::error::{param, Error, Result};
use crate::estimator::{blade_cdf, proxy_reward, ReferenceStats};

/// Index of the largest reward; ties go to the lowest index.
pub fn bon_select(rewards: &[f64]) -> Result<usize> {
    if rewards.is_empty() {
        return param("best-of-n needs at least one candidate");
    }
    let mut best = 0;
    for (i, &r) in rewards.iter().enumerate().skip(1) {
        if r > rewards[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Finite-support distribution with a reward per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    pub outcomes: Vec<String>,
    pub probs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(outcomes: Vec<String>, probs: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        if outcomes.is_empty() || outcomes.len() != probs.len() || probs.len() != rewards.len() {
            return param(format!(
                "distribution needs matching non-empty columns, got {}/{}/{}",
                outcomes.len(),
                probs.len(),
                rewards.len()
            ));
        }
        if probs.iter().any(|&p| p.is_nan() || p < 0.0) {
            return param("probabilities must be >= 0");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return param(format!("probabilities sum to {total}, expected 1"));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("outcome reward".into()));
        }
        Ok(Self {
            outcomes,
            probs,
            rewards,
        })
    }

    /// Parses whitespace-separated `outcome prob reward` rows. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_table(text: &str) -> Result<Self> {
        let (mut outcomes, mut probs, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Parse {
                line: idx + 1,
                message,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [name, p, r] = cols[..] else {
                return Err(bad(format!("expected 3 columns, got {}", cols.len())));
            };
            outcomes.push(name.to_string());
            probs.push(
                p.parse()
                    .map_err(|_| bad(format!("bad probability {p:?}")))?,
            );
            rewards.push(r.parse().map_err(|_| bad(format!("bad reward {r:?}")))?);
        }
        Self::new(outcomes, probs, rewards)
    }

    pub fn expected_reward(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.rewards)
            .map(|(p, r)| p * r)
            .sum()
    }

    fn lower_mass(&self, r: f64) -> f64 {
        self.probs
            .iter()
            .zip(&self.rewards)
            .filter(|(_, &x)| x < r)
            .map(|(p, _)| p)
            .sum()
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

/// Distribution of the Best-of-`n` output when candidates are drawn i.i.d.
/// from `dist`:
///
/// ```text
/// p_bon(y) = sum_{k=1..n} C(n,k) F(y)^(n-k) p(y)^k,   F(y) = P(R < R(y))
/// ```
///
/// Rewards must be pairwise distinct.
pub fn bon_exact_distribution(dist: &DiscreteDist, n: u32) -> Result<DiscreteDist> {
    if n == 0 {
        return param("n must be >= 1");
    }
    for (i, r) in dist.rewards.iter().enumerate() {
        if dist.rewards[..i].contains(r) {
            return param(format!(
                "duplicate reward {r}: the exact BoN law needs distinct rewards"
            ));
        }
    }
    let probs = dist
        .probs
        .iter()
        .zip(&dist.rewards)
        .map(|(&p, &r)| {
            let below = dist.lower_mass(r);
            (1..=n)
                .map(|k| binomial(n, k) * below.powi((n - k) as i32) * p.powi(k as i32))
                .sum()
        })
        .collect();
    Ok(DiscreteDist {
        outcomes: dist.outcomes.clone(),
        probs,
        rewards: dist.rewards.clone(),
    })
}

/// Static BoN-alignment reward `(n - 1) * log F_ref(r)` with the floor rule.
pub fn static_quantile_reward(
    stats: &ReferenceStats,
    r: f64,
    n: u32,
    cdf_floor: f64,
) -> Result<f64> {
    if n < 2 {
        return param(format!("n must be >= 2, got {n}"));
    }
    Ok(proxy_reward(blade_cdf(stats, &[], 0.0, r), n, cdf_floor))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VbonTerms {
    pub utility: f64,
    pub kl_penalty: f64,
    pub total: f64,
}

/// Per-sample terms of the vBoN surrogate: quantile utility minus the
/// log-ratio to the reference policy.
pub fn vbon_objective_terms(
    quantile_reward: f64,
    logprob_theta: f64,
    logprob_ref: f64,
) -> Result<VbonTerms> {
    if !(logprob_theta.is_finite() && logprob_ref.is_finite()) {
        return Err(Error::NonFinite("log-probability".into()));
    }
    let kl_penalty = logprob_theta - logprob_ref;
    Ok(VbonTerms {
        utility: quantile_reward,
        kl_penalty,
        total: quantile_reward - kl_penalty,
    })
}
