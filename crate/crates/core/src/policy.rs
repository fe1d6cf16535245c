//! Masked autoregressive list policy.
//!
//! Each context owns one row of item logits shared by every list position. A
//! list of length `K` is generated one item per step: the step distribution is
//! the tempered softmax of the row restricted to items not yet chosen, so a
//! list can never repeat an item. Log-probabilities and their gradients with
//! respect to the logits are exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::metrics::RecList;
use crate::ItemId;

/// Dense row-major `rows x cols` table; used for logits and for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogitTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}x{cols} table",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LogitTable, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Parameters of the list policy: a `n_contexts x n_items` logit table and
/// the generated list length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub logits: LogitTable,
    list_len: usize,
}

impl PolicyParams {
    /// All-zero logits, i.e. the uniform policy.
    pub fn uniform(n_contexts: usize, n_items: usize, list_len: usize) -> Result<Self> {
        Self::from_logits(LogitTable::zeros(n_contexts, n_items), list_len)
    }

    pub fn from_logits(logits: LogitTable, list_len: usize) -> Result<Self> {
        if list_len == 0 || list_len > logits.cols() {
            return param(format!(
                "list length {list_len} must be in [1, {}]",
                logits.cols()
            ));
        }
        if !logits.is_finite() {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(Self { logits, list_len })
    }

    pub fn n_contexts(&self) -> usize {
        self.logits.rows()
    }

    pub fn n_items(&self) -> usize {
        self.logits.cols()
    }

    pub fn list_len(&self) -> usize {
        self.list_len
    }

    fn check_ctx(&self, ctx: usize) -> Result<()> {
        if ctx >= self.n_contexts() {
            return param(format!(
                "context {ctx} out of range for {} contexts",
                self.n_contexts()
            ));
        }
        Ok(())
    }
}

/// One sampled list with the log-probability of each step at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub list: RecList,
    pub step_logprobs: Vec<f64>,
    pub total_logprob: f64,
    pub reward: Option<f64>,
}

/// `G >= 2` rollouts drawn for the same context.
#[derive(Debug, Clone)]
pub struct Group {
    pub context_id: usize,
    pub rollouts: Vec<Rollout>,
}

impl Group {
    pub fn new(context_id: usize, rollouts: Vec<Rollout>) -> Result<Self> {
        if rollouts.len() < 2 {
            return param(format!(
                "a group needs at least 2 rollouts, got {}",
                rollouts.len()
            ));
        }
        Ok(Self {
            context_id,
            rollouts,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Scored rewards in rollout order; errors if any rollout is unscored.
    pub fn rewards(&self) -> Result<Vec<f64>> {
        self.rollouts
            .iter()
            .map(|r| {
                r.reward
                    .ok_or_else(|| Error::State("group contains an unscored rollout".into()))
            })
            .collect()
    }
}

/// Tempered masked distribution at one generation step.
#[derive(Debug, Clone)]
pub(crate) struct StepDist {
    pub probs: Vec<f64>,
    /// `-inf` on masked items.
    pub logprobs: Vec<f64>,
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return param(format!("temperature must be positive, got {temperature}"));
    }
    Ok(())
}

pub(crate) fn masked_distribution(row: &[f64], masked: &[bool], temperature: f64) -> StepDist {
    let max = row
        .iter()
        .zip(masked)
        .filter(|(_, &m)| !m)
        .map(|(&z, _)| z / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .zip(masked)
        .filter(|(_, &m)| !m)
        .map(|(&z, _)| (z / temperature - max).exp())
        .sum();
    let log_norm = max + sum.ln();
    let logprobs: Vec<f64> = row
        .iter()
        .zip(masked)
        .map(|(&z, &m)| {
            if m {
                f64::NEG_INFINITY
            } else {
                z / temperature - log_norm
            }
        })
        .collect();
    let probs = logprobs.iter().map(|&lp| lp.exp()).collect();
    StepDist { probs, logprobs }
}

/// Replays `list` step by step, returning each step's distribution.
pub(crate) fn replay(row: &[f64], list: &[ItemId], temperature: f64) -> Vec<StepDist> {
    let mut masked = vec![false; row.len()];
    let mut steps = Vec::with_capacity(list.len());
    for &item in list {
        steps.push(masked_distribution(row, &masked, temperature));
        masked[item] = true;
    }
    steps
}

fn check_list(params: &PolicyParams, list: &[ItemId]) -> Result<()> {
    if let Some(bad) = list.iter().find(|&&i| i >= params.n_items()) {
        return param(format!(
            "item {bad} out of range for {} items",
            params.n_items()
        ));
    }
    for (i, item) in list.iter().enumerate() {
        if list[..i].contains(item) {
            return param(format!("duplicate item {item} in list"));
        }
    }
    Ok(())
}

/// Probability vector of the next item given `prefix`.
pub fn step_distribution(
    params: &PolicyParams,
    ctx: usize,
    prefix: &[ItemId],
    temperature: f64,
) -> Result<Vec<f64>> {
    params.check_ctx(ctx)?;
    check_temperature(temperature)?;
    check_list(params, prefix)?;
    if prefix.len() >= params.n_items() {
        return Err(Error::State("prefix exhausts the catalog".into()));
    }
    let mut masked = vec![false; params.n_items()];
    for &i in prefix {
        masked[i] = true;
    }
    Ok(masked_distribution(params.logits.row(ctx), &masked, temperature).probs)
}

/// Draws one list of `params.list_len()` items. Consumes exactly one uniform
/// variate per step.
pub fn sample_list<R: Rng + ?Sized>(
    params: &PolicyParams,
    ctx: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Rollout> {
    params.check_ctx(ctx)?;
    check_temperature(temperature)?;
    let row = params.logits.row(ctx);
    let mut masked = vec![false; params.n_items()];
    let mut items = Vec::with_capacity(params.list_len());
    let mut step_logprobs = Vec::with_capacity(params.list_len());
    for _ in 0..params.list_len() {
        let dist = masked_distribution(row, &masked, temperature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &p) in dist.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                chosen = Some(i);
                if u < acc {
                    break;
                }
            }
        }
        // `chosen` falls back to the last positive-probability item when
        // rounding leaves the cumulative sum just below u.
        let chosen = chosen
            .ok_or_else(|| Error::State("no unmasked item has positive probability".into()))?;
        step_logprobs.push(dist.logprobs[chosen]);
        masked[chosen] = true;
        items.push(chosen);
    }
    let total_logprob = step_logprobs.iter().sum();
    Ok(Rollout {
        list: RecList::new(items)?,
        step_logprobs,
        total_logprob,
        reward: None,
    })
}

/// Per-step and total log-probability of `list`.
pub fn logprob(
    params: &PolicyParams,
    ctx: usize,
    list: &[ItemId],
    temperature: f64,
) -> Result<(Vec<f64>, f64)> {
    params.check_ctx(ctx)?;
    check_temperature(temperature)?;
    check_list(params, list)?;
    let steps: Vec<f64> = replay(params.logits.row(ctx), list, temperature)
        .iter()
        .zip(list)
        .map(|(d, &item)| d.logprobs[item])
        .collect();
    let total = steps.iter().sum();
    Ok((steps, total))
}

/// Adds `weight * d/dz log p_t(list[t])` for every step into `out` (one row).
pub(crate) fn accumulate_step_grads(
    out: &mut [f64],
    steps: &[StepDist],
    list: &[ItemId],
    weights: &[f64],
    temperature: f64,
) {
    for ((dist, &chosen), &w) in steps.iter().zip(list).zip(weights) {
        if w == 0.0 {
            continue;
        }
        let scale = w / temperature;
        for (g, &p) in out.iter_mut().zip(&dist.probs) {
            *g -= scale * p;
        }
        out[chosen] += scale;
    }
}

/// Exact gradient of the total log-probability of `list` w.r.t. the logits.
pub fn grad_logprob(
    params: &PolicyParams,
    ctx: usize,
    list: &[ItemId],
    temperature: f64,
) -> Result<LogitTable> {
    params.check_ctx(ctx)?;
    check_temperature(temperature)?;
    check_list(params, list)?;
    let steps = replay(params.logits.row(ctx), list, temperature);
    let mut grad = LogitTable::zeros(params.n_contexts(), params.n_items());
    let ones = vec![1.0; list.len()];
    accumulate_step_grads(grad.row_mut(ctx), &steps, list, &ones, temperature);
    Ok(grad)
}

/// Step-wise argmax decoding; ties go to the lowest item id.
pub fn greedy_decode(params: &PolicyParams, ctx: usize) -> Result<RecList> {
    params.check_ctx(ctx)?;
    let row = params.logits.row(ctx);
    let mut masked = vec![false; row.len()];
    let mut items = Vec::with_capacity(params.list_len());
    for _ in 0..params.list_len() {
        // Argmax of the softmax is the argmax of the unmasked logits.
        let best = (0..row.len())
            .filter(|&i| !masked[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if row[b] >= row[i] => Some(b),
                _ => Some(i),
            })
            .expect("list_len <= n_items leaves an unmasked item");
        masked[best] = true;
        items.push(best);
    }
    RecList::new(items)
}
