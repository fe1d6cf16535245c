//! Group-relative policy optimization with Bayesian quantile targets.
//!
//! One training step draws a single group of `G` lists for one context and
//! uses it twice: first as the batch evidence of the quantile estimator, then
//! as the GRPO group whose normalized proxy rewards become advantages. The
//! clipped surrogate is maximized with one plain gradient-ascent step.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{Catalog, Dataset, UserContext};
use crate::error::{io_err, param, Error, Result};
use crate::estimator::{batch_cdf, blade_cdf, default_cdf_floor, proxy_reward, ReferenceStats};
use crate::metrics::{genre_dist, reward, RecList, RewardSpec};
use crate::policy::{
    accumulate_step_grads, grad_logprob, greedy_decode, replay, sample_list, Group, LogitTable,
    PolicyParams,
};
use crate::ItemId;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub beta_kl: f64,
    /// Groups whose reward standard deviation is below this get zero advantages.
    pub sigma_floor: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta_kl: 0.1,
            sigma_floor: 1e-12,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return param(format!(
                "clip epsilon must be in (0, 1], got {}",
                self.epsilon
            ));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return param(format!("beta_kl must be >= 0, got {}", self.beta_kl));
        }
        if self.sigma_floor.is_nan() || self.sigma_floor <= 0.0 {
            return param(format!("sigma_floor must be > 0, got {}", self.sigma_floor));
        }
        Ok(())
    }
}

/// `(r - mean) / std` over the group, population standard deviation.
pub fn group_advantages(rewards: &[f64], sigma_floor: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return param(format!("group advantages need G >= 2, got {g}"));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std.is_nan() || std < sigma_floor {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Value and exact gradient (w.r.t. `params` logits) of
///
/// ```text
/// 1/(G K) sum_i sum_t [ min(rho A_i, clip(rho, 1-eps, 1+eps) A_i) - beta KL_t ]
/// ```
///
/// `rho` is the per-step probability ratio against the log-probabilities
/// recorded in the rollouts at sampling time, and `KL_t` is the exact
/// categorical KL between the current and reference step distributions on the
/// sampled prefix.
pub fn surrogate_and_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &Group,
    advantages: &[f64],
    clip: &ClipConfig,
    temperature: f64,
) -> Result<(f64, LogitTable)> {
    let ctx = group.context_id;
    if ctx >= params.n_contexts() {
        return param(format!(
            "group context {ctx} out of range for {} contexts",
            params.n_contexts()
        ));
    }
    if params.logits.rows() != reference.logits.rows()
        || params.logits.cols() != reference.logits.cols()
    {
        return Err(Error::Shape(
            "policy and reference tables differ in shape".into(),
        ));
    }
    if advantages.len() != group.len() {
        return param(format!(
            "{} advantages for a group of {}",
            advantages.len(),
            group.len()
        ));
    }
    let row = params.logits.row(ctx);
    let ref_row = reference.logits.row(ctx);
    let mut grad = LogitTable::zeros(params.n_contexts(), params.n_items());
    let mut objective = 0.0;
    let mut terms = 0usize;

    for (rollout, &adv) in group.rollouts.iter().zip(advantages) {
        let list = rollout.list.items();
        if rollout.step_logprobs.len() != list.len() {
            return param("rollout step log-probabilities do not match its list");
        }
        let steps = replay(row, list, temperature);
        let ref_steps = replay(ref_row, list, temperature);
        let mut weights = Vec::with_capacity(list.len());
        for (t, &item) in list.iter().enumerate() {
            let ratio = (steps[t].logprobs[item] - rollout.step_logprobs[t]).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip.epsilon, 1.0 + clip.epsilon) * adv;
            if unclipped <= clipped {
                objective += unclipped;
                weights.push(unclipped);
            } else {
                objective += clipped;
                weights.push(0.0);
            }

            if clip.beta_kl > 0.0 {
                let p = &steps[t];
                let q = &ref_steps[t];
                let mut kl = 0.0;
                for j in 0..p.probs.len() {
                    if p.logprobs[j].is_finite() && p.probs[j] > 0.0 {
                        kl += p.probs[j] * (p.logprobs[j] - q.logprobs[j]);
                    }
                }
                objective -= clip.beta_kl * kl;
                // d KL / dz_j = p_j (log p_j - log q_j - KL) / temperature
                let out = grad.row_mut(ctx);
                for (j, g) in out.iter_mut().enumerate() {
                    if p.logprobs[j].is_finite() && p.probs[j] > 0.0 {
                        *g -= clip.beta_kl * p.probs[j] * (p.logprobs[j] - q.logprobs[j] - kl)
                            / temperature;
                    }
                }
            }
            terms += 1;
        }
        // d(rho A)/dz = rho A * d log p_t / dz
        accumulate_step_grads(grad.row_mut(ctx), &steps, list, &weights, temperature);
    }

    let scale = 1.0 / terms as f64;
    grad.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
    Ok((objective * scale, grad))
}

/// How the quantile of a candidate's reward is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetEstimator {
    /// Reference prior fused with batch evidence at weight `tau`; `tau = 0`
    /// is the static reference CDF.
    Bayesian { tau: f64 },
    /// Batch evidence only, no reference prior.
    BatchOnly,
}

impl TargetEstimator {
    /// Quantile estimate of `r`.
    pub fn cdf(&self, stats: &ReferenceStats, group_rewards: &[f64], r: f64) -> f64 {
        match *self {
            TargetEstimator::Bayesian { tau } => blade_cdf(stats, group_rewards, tau, r),
            TargetEstimator::BatchOnly => batch_cdf(group_rewards, r),
        }
    }

    pub fn default_floor(&self, m: usize, g: usize) -> f64 {
        match *self {
            TargetEstimator::Bayesian { tau } => default_cdf_floor(m as f64 + tau * g as f64),
            TargetEstimator::BatchOnly => default_cdf_floor(g as f64),
        }
    }
}

/// Proxy rewards `(N - 1) log F(R_i)` for every member of a group, using the
/// group itself as the batch evidence.
pub fn group_proxy_rewards(
    estimator: TargetEstimator,
    stats: &ReferenceStats,
    group_rewards: &[f64],
    bon_n: u32,
    cdf_floor: Option<f64>,
) -> Vec<f64> {
    let floor =
        cdf_floor.unwrap_or_else(|| estimator.default_floor(stats.len(), group_rewards.len()));
    group_rewards
        .iter()
        .map(|&r| proxy_reward(estimator.cdf(stats, group_rewards, r), bon_n, floor))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub group_size: usize,
    pub estimator: TargetEstimator,
    pub bon_n: u32,
    pub cdf_floor: Option<f64>,
    pub reward: RewardSpec,
    pub clip: ClipConfig,
    pub temperature: f64,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            estimator: TargetEstimator::Bayesian { tau: 0.3 },
            bon_n: 4,
            cdf_floor: None,
            reward: RewardSpec::ndcg(5),
            clip: ClipConfig::default(),
            temperature: 1.0,
            lr: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return param(format!("group size must be >= 2, got {}", self.group_size));
        }
        if let TargetEstimator::Bayesian { tau } = self.estimator {
            if !(tau >= 0.0 && tau.is_finite()) {
                return param(format!("tau must be >= 0, got {tau}"));
            }
        }
        if self.bon_n < 2 {
            return param(format!("bon_n must be >= 2, got {}", self.bon_n));
        }
        if let Some(f) = self.cdf_floor {
            if !(f > 0.0 && f < 1.0) {
                return param(format!("cdf_floor must be in (0, 1), got {f}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return param(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return param(format!("learning rate must be > 0, got {}", self.lr));
        }
        self.clip.validate()?;
        self.reward.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub mean_raw_reward: f64,
    pub mean_proxy_reward: f64,
    pub mean_abs_advantage: f64,
    pub grad_norm: f64,
    pub eval_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub old_params: PolicyParams,
    pub ref_params: PolicyParams,
    /// One entry per dataset context, indexed by context position.
    pub refstats: Vec<ReferenceStats>,
    pub step: u64,
    pub curve: Vec<CurvePoint>,
    /// Total number of lists sampled by training steps.
    pub rollouts_drawn: u64,
}

impl TrainState {
    /// A state whose current, sampling and reference policies all equal `params`.
    pub fn new(params: PolicyParams, refstats: Vec<ReferenceStats>) -> Self {
        Self {
            old_params: params.clone(),
            ref_params: params.clone(),
            params,
            refstats,
            step: 0,
            curve: Vec::new(),
            rollouts_drawn: 0,
        }
    }
}

/// Mean greedy-decode reward over every context of `dataset`.
pub fn evaluate_greedy(params: &PolicyParams, dataset: &Dataset, spec: &RewardSpec) -> Result<f64> {
    if dataset.contexts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (idx, ctx) in dataset.contexts.iter().enumerate() {
        let list = greedy_decode(params, idx)?;
        total += reward(spec, &list, ctx, &dataset.catalog)?;
    }
    Ok(total / dataset.contexts.len() as f64)
}

/// Statistics of a single training step before evaluation.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub raw_rewards: Vec<f64>,
    pub proxy_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub objective: f64,
    pub grad: LogitTable,
}

/// Samples one group for context `ctx_id`, turns it into proxy-reward
/// advantages and applies one gradient-ascent step. Returns the step's
/// statistics; does not evaluate.
pub fn train_step_core<R: Rng + ?Sized>(
    state: &mut TrainState,
    dataset: &Dataset,
    ctx_id: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    cfg.validate()?;
    let ctx = dataset
        .contexts
        .get(ctx_id)
        .ok_or_else(|| Error::Parameter(format!("context {ctx_id} not in dataset")))?;
    let stats = state
        .refstats
        .get(ctx_id)
        .ok_or_else(|| Error::State(format!("no reference statistics for context {ctx_id}")))?;

    state.old_params.clone_from(&state.params);
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let mut r = sample_list(&state.old_params, ctx_id, cfg.temperature, rng)?;
        r.reward = Some(reward(&cfg.reward, &r.list, ctx, &dataset.catalog)?);
        rollouts.push(r);
    }
    state.rollouts_drawn += cfg.group_size as u64;
    let group = Group::new(ctx_id, rollouts)?;

    let raw_rewards = group.rewards()?;
    let proxy_rewards =
        group_proxy_rewards(cfg.estimator, stats, &raw_rewards, cfg.bon_n, cfg.cdf_floor);
    let advantages = group_advantages(&proxy_rewards, cfg.clip.sigma_floor)?;
    let (objective, grad) = surrogate_and_grad(
        &state.params,
        &state.ref_params,
        &group,
        &advantages,
        &cfg.clip,
        cfg.temperature,
    )?;
    if !objective.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!(
            "surrogate objective at step {} (context {ctx_id})",
            state.step + 1
        )));
    }
    state.params.logits.add_scaled(&grad, cfg.lr);
    state.step += 1;
    Ok(StepOutcome {
        raw_rewards,
        proxy_rewards,
        advantages,
        objective,
        grad,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Full training step: [`train_step_core`] followed by greedy evaluation on
/// every context. Appends the resulting point to the state's curve.
pub fn blade_train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    dataset: &Dataset,
    ctx_id: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<CurvePoint> {
    let out = train_step_core(state, dataset, ctx_id, cfg, rng)?;
    let point = CurvePoint {
        step: state.step,
        mean_raw_reward: mean(&out.raw_rewards),
        mean_proxy_reward: mean(&out.proxy_rewards),
        mean_abs_advantage: out.advantages.iter().map(|a| a.abs()).sum::<f64>()
            / out.advantages.len() as f64,
        grad_norm: out.grad.norm(),
        eval_metric: evaluate_greedy(&state.params, dataset, &cfg.reward)?,
    };
    state.curve.push(point);
    Ok(point)
}

/// Heuristic supervision list: the non-history items whose genres best match
/// the history's genre distribution, ties broken by item id.
pub fn teacher_list(ctx: &UserContext, catalog: &Catalog, k: usize) -> Result<Vec<ItemId>> {
    let hist = genre_dist(&ctx.history, catalog)?;
    let mut scored: Vec<(f64, ItemId)> = (0..catalog.n_items())
        .filter(|i| !ctx.history.contains(i))
        .map(|i| {
            let set = catalog.genres_of(i);
            let affinity = set.iter().map(|&g| hist.probs[g]).sum::<f64>() / set.len() as f64;
            (affinity, i)
        })
        .collect();
    if scored.len() < k {
        return param(format!(
            "only {} non-history items for a teacher list of {k}",
            scored.len()
        ));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartConfig {
    pub sft_steps: usize,
    pub lr: f64,
    /// Reference rollouts per context.
    pub m: usize,
    pub seed: u64,
    pub list_len: usize,
    pub temperature: f64,
    pub reward: RewardSpec,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            sft_steps: 20,
            lr: 0.5,
            m: 128,
            seed: 0,
            list_len: 5,
            temperature: 1.0,
            reward: RewardSpec::ndcg(5),
        }
    }
}

/// Supervised initialization from zero logits followed by reference sampling.
///
/// Each SFT step adds `lr * grad log p(teacher list)` to every context row.
/// The result is frozen as both the reference and sampling policy, and `m`
/// rollouts per context from it are scored into the reference statistics.
pub fn warm_start(dataset: &Dataset, cfg: &WarmStartConfig) -> Result<TrainState> {
    if dataset.contexts.is_empty() {
        return param("warm start needs at least one context");
    }
    if cfg.m == 0 {
        return param("reference set size M must be >= 1");
    }
    let mut params = PolicyParams::uniform(dataset.n_contexts(), dataset.n_items(), cfg.list_len)?;
    let teachers = dataset
        .contexts
        .iter()
        .map(|ctx| teacher_list(ctx, &dataset.catalog, cfg.list_len))
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..cfg.sft_steps {
        for (idx, teacher) in teachers.iter().enumerate() {
            let grad = grad_logprob(&params, idx, teacher, 1.0)?;
            params.logits.add_scaled(&grad, cfg.lr);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut refstats = Vec::with_capacity(dataset.n_contexts());
    for (idx, ctx) in dataset.contexts.iter().enumerate() {
        let rewards = (0..cfg.m)
            .map(|_| {
                let r = sample_list(&params, idx, cfg.temperature, &mut rng)?;
                reward(&cfg.reward, &r.list, ctx, &dataset.catalog)
            })
            .collect::<Result<Vec<_>>>()?;
        refstats.push(ReferenceStats::new(idx, rewards)?);
    }
    Ok(TrainState::new(params, refstats))
}

/// Serialized training snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
    pub refstats: Vec<ReferenceStats>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            step: state.step,
            params: state.params.clone(),
            ref_params: state.ref_params.clone(),
            refstats: state.refstats.clone(),
        }
    }

    /// Errors naming both shapes when the checkpoint does not fit `dataset`.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        let (rows, cols) = (self.params.n_contexts(), self.params.n_items());
        if rows != dataset.n_contexts() || cols != dataset.n_items() {
            return Err(Error::Shape(format!(
                "checkpoint policy is {rows} contexts x {cols} items, dataset has {} contexts x {} items",
                dataset.n_contexts(),
                dataset.n_items()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        out.flush().map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(io_err(path))?;
        let raw: serde_json::Value =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
                line: e.line(),
                message: e.to_string(),
            })?;
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Version {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_value(raw).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        // Re-validate through the checked constructors.
        PolicyParams::from_logits(ck.params.logits.clone(), ck.params.list_len())?;
        PolicyParams::from_logits(ck.ref_params.logits.clone(), ck.ref_params.list_len())?;
        if ck.params.logits.rows() != ck.ref_params.logits.rows()
            || ck.params.logits.cols() != ck.ref_params.logits.cols()
        {
            return Err(Error::Shape(
                "checkpoint policy and reference shapes differ".into(),
            ));
        }
        Ok(ck)
    }
}

/// Writes curve points as comma-separated rows under the header
/// `step,mean_raw_reward,mean_proxy_reward,mean_abs_advantage,grad_norm,eval_metric`.
pub fn write_curve(points: &[CurvePoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(io_err(""))?;
    Ok(())
}

pub fn save_curve(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_curve(points, BufWriter::new(file))
}

pub fn load_curve(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|p| p.map_err(Error::from)).collect()
}

/// Greedy list for every context, in dataset order.
pub fn greedy_lists(params: &PolicyParams, dataset: &Dataset) -> Result<Vec<RecList>> {
    (0..dataset.n_contexts())
        .map(|i| greedy_decode(params, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_catalog, generate_contexts};
    use crate::estimator::build_reference;
    use crate::policy::{logprob, Rollout};

    fn tiny_dataset() -> Dataset {
        let catalog = generate_catalog(3, 12, 3, 2).unwrap();
        generate_contexts(&catalog, 4, 3, 3, 3).unwrap()
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 2.0, 3.0], 1e-12).unwrap();
        let s = 1.5f64.sqrt();
        for (x, y) in a.iter().zip([-s, 0.0, s]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(group_advantages(&[0.4; 5], 1e-12).unwrap(), vec![0.0; 5]);
        assert_eq!(
            group_advantages(&[0.0, 1.0], 1e-12).unwrap(),
            vec![-1.0, 1.0]
        );
        assert!(group_advantages(&[1.0], 1e-12).is_err());
    }

    fn one_group(params: &PolicyParams, ctx: usize, g: usize, seed: u64) -> Group {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rollouts: Vec<Rollout> = (0..g)
            .map(|_| sample_list(params, ctx, 1.0, &mut rng).unwrap())
            .collect();
        Group::new(ctx, rollouts).unwrap()
    }

    #[test]
    fn on_policy_objective_is_mean_advantage() {
        let params = PolicyParams::uniform(2, 6, 3).unwrap();
        let group = one_group(&params, 1, 4, 9);
        let adv = [0.5, -1.0, 2.0, -0.25];
        let clip = ClipConfig {
            beta_kl: 0.0,
            ..Default::default()
        };
        let (obj, _) = surrogate_and_grad(&params, &params, &group, &adv, &clip, 1.0).unwrap();
        let expected = adv.iter().sum::<f64>() / 4.0;
        assert!((obj - expected).abs() < 1e-12);

        // Reference equal to current: KL is exactly zero whatever beta.
        let clip = ClipConfig {
            beta_kl: 3.0,
            ..Default::default()
        };
        let (obj_kl, _) = surrogate_and_grad(&params, &params, &group, &adv, &clip, 1.0).unwrap();
        assert_eq!(obj_kl, obj);
    }

    #[test]
    fn on_policy_gradient_is_reinforce() {
        let mut params = PolicyParams::uniform(1, 5, 2).unwrap();
        params
            .logits
            .as_mut_slice()
            .copy_from_slice(&[0.3, -0.2, 0.9, 0.0, -1.1]);
        let group = one_group(&params, 0, 6, 2);
        let adv = group_advantages(&[0.1, 0.7, 0.3, 0.3, 0.9, 0.0], 1e-12).unwrap();
        let clip = ClipConfig {
            beta_kl: 0.0,
            ..Default::default()
        };
        let (_, grad) = surrogate_and_grad(&params, &params, &group, &adv, &clip, 1.0).unwrap();
        let mut expected = LogitTable::zeros(1, 5);
        for (r, a) in group.rollouts.iter().zip(&adv) {
            let g = grad_logprob(&params, 0, &r.list, 1.0).unwrap();
            expected.add_scaled(&g, a / (group.len() * 2) as f64);
        }
        for (x, y) in grad.as_slice().iter().zip(expected.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn clipped_arm_has_no_ratio_gradient() {
        // One item-step list: ratio = p_new / p_old, with p_old recorded.
        let params = PolicyParams::uniform(1, 2, 1).unwrap();
        let eps: f64 = 0.2;
        let (steps, _) = logprob(&params, 0, &[0], 1.0).unwrap();
        // Pretend the sample was drawn with p_old = 0.5 / (1 + 2 eps).
        let old_lp = (0.5 / (1.0 + 2.0 * eps)).ln();
        assert!((steps[0] - 0.5f64.ln()).abs() < 1e-15);
        let rollout = Rollout {
            list: RecList::new(vec![0]).unwrap(),
            step_logprobs: vec![old_lp],
            total_logprob: old_lp,
            reward: Some(1.0),
        };
        let other = Rollout {
            list: RecList::new(vec![1]).unwrap(),
            step_logprobs: vec![0.5f64.ln()],
            total_logprob: 0.5f64.ln(),
            reward: Some(0.0),
        };
        let group = Group::new(0, vec![rollout, other]).unwrap();
        let clip = ClipConfig {
            epsilon: eps,
            beta_kl: 0.0,
            sigma_floor: 1e-12,
        };
        let (obj, grad) =
            surrogate_and_grad(&params, &params, &group, &[1.0, 0.0], &clip, 1.0).unwrap();
        assert!((obj - (1.0 + eps) / 2.0).abs() < 1e-12);
        assert_eq!(grad.as_slice(), &[0.0, 0.0]);

        // Negative advantage at a high ratio keeps the unclipped arm.
        let (_, grad) =
            surrogate_and_grad(&params, &params, &group, &[-1.0, 0.0], &clip, 1.0).unwrap();
        assert!(grad.norm() > 0.0);
    }

    #[test]
    fn surrogate_rejects_mismatch() {
        let params = PolicyParams::uniform(1, 4, 2).unwrap();
        let group = one_group(&params, 0, 3, 1);
        let clip = ClipConfig::default();
        assert!(surrogate_and_grad(&params, &params, &group, &[0.0; 2], &clip, 1.0).is_err());
        let wrong = Group::new(5, group.rollouts.clone()).unwrap();
        assert!(surrogate_and_grad(&params, &params, &wrong, &[0.0; 3], &clip, 1.0).is_err());
    }

    #[test]
    fn proxy_rewards_respect_estimator() {
        let stats = build_reference(&[0.1, 0.2, 0.3]).unwrap();
        let group = [0.5, 0.9, 0.05];
        let static_p = group_proxy_rewards(
            TargetEstimator::Bayesian { tau: 0.0 },
            &stats,
            &group,
            4,
            None,
        );
        assert_eq!(&static_p[..2], &[0.0, 0.0]);
        let dyn_p = group_proxy_rewards(
            TargetEstimator::Bayesian { tau: 0.5 },
            &stats,
            &group,
            4,
            None,
        );
        assert!(dyn_p[1] > dyn_p[0] && dyn_p[0] > dyn_p[2]);
        assert_eq!(dyn_p[1], 3.0 * (4.0f64 / 4.5).ln());
        let batch = group_proxy_rewards(TargetEstimator::BatchOnly, &stats, &group, 2, None);
        assert_eq!(batch[1], (2.0f64 / 3.0).ln());
        assert_eq!(batch[2], (1.0f64 / 6.0).ln());
    }

    #[test]
    fn train_step_draws_exactly_one_group() {
        let ds = tiny_dataset();
        let ws = WarmStartConfig {
            m: 8,
            list_len: 2,
            reward: RewardSpec::ndcg(2),
            ..Default::default()
        };
        let mut state = warm_start(&ds, &ws).unwrap();
        let cfg = TrainConfig {
            group_size: 5,
            reward: RewardSpec::ndcg(2),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        blade_train_step(&mut state, &ds, 0, &cfg, &mut rng).unwrap();
        blade_train_step(&mut state, &ds, 1, &cfg, &mut rng).unwrap();
        assert_eq!(state.rollouts_drawn, 10);
        assert_eq!(state.step, 2);
        assert_eq!(state.curve.len(), 2);
        assert_eq!(state.ref_params, warm_start(&ds, &ws).unwrap().ref_params);
    }

    #[test]
    fn train_step_requires_refstats() {
        let ds = tiny_dataset();
        let params = PolicyParams::uniform(ds.n_contexts(), ds.n_items(), 2).unwrap();
        let mut state = TrainState::new(params, vec![]);
        let cfg = TrainConfig {
            reward: RewardSpec::ndcg(2),
            ..Default::default()
        };
        let err = blade_train_step(&mut state, &ds, 0, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn zero_sft_is_uniform_reference() {
        let ds = tiny_dataset();
        let ws = WarmStartConfig {
            sft_steps: 0,
            m: 4,
            list_len: 2,
            reward: RewardSpec::ndcg(2),
            ..Default::default()
        };
        let state = warm_start(&ds, &ws).unwrap();
        assert!(state.ref_params.logits.as_slice().iter().all(|&v| v == 0.0));
        assert!(state.refstats.iter().all(|s| s.len() == 4));
    }

    #[test]
    fn teacher_list_avoids_history() {
        let ds = tiny_dataset();
        for ctx in &ds.contexts {
            let t = teacher_list(ctx, &ds.catalog, 4).unwrap();
            assert_eq!(t.len(), 4);
            assert!(t.iter().all(|i| !ctx.history.contains(i)));
        }
    }

    #[test]
    fn curve_round_trip() {
        let pts = vec![
            CurvePoint {
                step: 0,
                mean_raw_reward: 0.1,
                mean_proxy_reward: -0.5,
                mean_abs_advantage: 0.0,
                grad_norm: 0.0,
                eval_metric: 0.25,
            },
            CurvePoint {
                step: 1,
                mean_raw_reward: 0.3,
                mean_proxy_reward: -0.1,
                mean_abs_advantage: 0.8,
                grad_norm: 1e-3,
                eval_metric: 0.5,
            },
        ];
        let mut buf = Vec::new();
        write_curve(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "step,mean_raw_reward,mean_proxy_reward,mean_abs_advantage,grad_norm,eval_metric\n"
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        save_curve(&pts, &path).unwrap();
        assert_eq!(load_curve(&path).unwrap(), pts);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let ds = tiny_dataset();
        let ws = WarmStartConfig {
            m: 4,
            list_len: 2,
            reward: RewardSpec::ndcg(2),
            ..Default::default()
        };
        let state = warm_start(&ds, &ws).unwrap();
        let ck = Checkpoint::from_state(&state);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.check_compatible(&ds).unwrap();

        let other = generate_contexts(&generate_catalog(1, 13, 3, 2).unwrap(), 1, 3, 3, 3).unwrap();
        let err = back.check_compatible(&other).unwrap_err().to_string();
        assert!(
            err.contains("12 items") && err.contains("13 items"),
            "{err}"
        );

        fs::write(&path, r#"{"version":7}"#).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Version { found: 7, .. })
        ));
    }
}
