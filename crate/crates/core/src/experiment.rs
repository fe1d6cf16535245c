//! Config-driven experiment runs: data generation, training, evaluation and
//! Best-of-N inference.
//!
//! A config file is flat `key = value` TOML; every key is optional and falls
//! back to [`ExperimentConfig::default`]. Command-line flags override file
//! values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bon::bon_select;
use crate::envsim::{generate_catalog, generate_contexts, load_dataset, save_dataset, Dataset};
use crate::error::{io_err, param, Error, Result};
use crate::grpo::{
    blade_train_step, evaluate_greedy, save_curve, warm_start, Checkpoint, ClipConfig, CurvePoint,
    TargetEstimator, TrainConfig, TrainState, WarmStartConfig,
};
use crate::metrics::{reward, RewardSpec};
use crate::policy::{greedy_decode, sample_list, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Reference prior plus batch evidence weighted by `tau`.
    Blade,
    /// Reference prior only (`tau = 0`).
    Static,
    /// Batch evidence only.
    NoPrior,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blade" => Ok(Mode::Blade),
            "static" => Ok(Mode::Static),
            "noprior" => Ok(Mode::NoPrior),
            _ => param(format!(
                "unknown mode {s:?} (expected blade, static or noprior)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset file; when absent the dataset is generated from the fields below.
    pub dataset: Option<PathBuf>,
    pub n_items: usize,
    pub n_genres: usize,
    pub max_genres_per_item: usize,
    pub n_contexts: usize,
    pub history_len: usize,
    pub target_len: usize,
    /// Seed for dataset generation; defaults to `seed`.
    pub data_seed: Option<u64>,

    pub list_len: usize,
    pub reward: String,
    pub group_size: usize,
    pub tau: f64,
    pub bon_n: u32,
    pub m: usize,
    pub steps: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub beta_kl: f64,
    pub temperature: f64,
    pub cdf_floor: Option<f64>,
    pub sft_steps: usize,
    pub sft_lr: f64,
    pub seed: u64,
    pub mode: Mode,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            n_items: 50,
            n_genres: 5,
            max_genres_per_item: 2,
            n_contexts: 20,
            history_len: 10,
            target_len: 10,
            data_seed: None,
            list_len: 5,
            reward: "ndcg@5".into(),
            group_size: 16,
            tau: 0.3,
            bon_n: 4,
            m: 128,
            steps: 400,
            lr: 20.0,
            epsilon: 0.2,
            beta_kl: 0.1,
            temperature: 1.0,
            cdf_floor: None,
            sft_steps: 20,
            sft_lr: 0.5,
            seed: 0,
            mode: Mode::Blade,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn reward_spec(&self) -> Result<RewardSpec> {
        self.reward.parse()
    }

    pub fn estimator(&self) -> TargetEstimator {
        match self.mode {
            Mode::Blade => TargetEstimator::Bayesian { tau: self.tau },
            Mode::Static => TargetEstimator::Bayesian { tau: 0.0 },
            Mode::NoPrior => TargetEstimator::BatchOnly,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            group_size: self.group_size,
            estimator: self.estimator(),
            bon_n: self.bon_n,
            cdf_floor: self.cdf_floor,
            reward: self.reward_spec()?,
            clip: ClipConfig {
                epsilon: self.epsilon,
                beta_kl: self.beta_kl,
                ..ClipConfig::default()
            },
            temperature: self.temperature,
            lr: self.lr,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn warm_start_config(&self) -> Result<WarmStartConfig> {
        Ok(WarmStartConfig {
            sft_steps: self.sft_steps,
            lr: self.sft_lr,
            m: self.m,
            seed: self.seed,
            list_len: self.list_len,
            temperature: self.temperature,
            reward: self.reward_spec()?,
        })
    }

    fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Generates the dataset described by the size fields.
    pub fn generate_dataset(&self) -> Result<Dataset> {
        let seed = self.data_seed();
        let catalog =
            generate_catalog(seed, self.n_items, self.n_genres, self.max_genres_per_item)?;
        generate_contexts(
            &catalog,
            seed,
            self.n_contexts,
            self.history_len,
            self.target_len,
        )
    }

    /// Loads `dataset` if set, otherwise generates it.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(path) => load_dataset(path),
            None => self.generate_dataset(),
        }
    }
}

/// Writes the generated dataset to `path` and returns it.
pub fn gen_data(cfg: &ExperimentConfig, path: impl AsRef<Path>) -> Result<Dataset> {
    let ds = cfg.generate_dataset()?;
    save_dataset(&ds, path)?;
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub dataset: Dataset,
    pub state: TrainState,
}

impl TrainRun {
    pub fn curve(&self) -> &[CurvePoint] {
        &self.state.curve
    }

    pub fn final_eval(&self) -> f64 {
        self.state.curve.last().map_or(0.0, |p| p.eval_metric)
    }
}

pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Warm start, then `steps` training steps cycling over contexts in order.
/// The curve starts with a step-0 point for the warm-started policy. When
/// `out` is set, the curve and final checkpoint are written there.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    let dataset = cfg.dataset()?;
    if dataset.contexts.is_empty() {
        return param("dataset has no contexts");
    }
    let train_cfg = cfg.train_config()?;
    let mut state = warm_start(&dataset, &cfg.warm_start_config()?)?;

    let ref_mean = {
        let all: Vec<f64> = state
            .refstats
            .iter()
            .flat_map(|s| s.sorted_rewards().iter().copied())
            .collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    state.curve.push(CurvePoint {
        step: 0,
        mean_raw_reward: ref_mean,
        mean_proxy_reward: 0.0,
        mean_abs_advantage: 0.0,
        grad_norm: 0.0,
        eval_metric: evaluate_greedy(&state.params, &dataset, &train_cfg.reward)?,
    });

    // Separate stream from the warm-start sampler.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    for step in 0..cfg.steps {
        let ctx = step % dataset.n_contexts();
        blade_train_step(&mut state, &dataset, ctx, &train_cfg, &mut rng)?;
    }

    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_curve(&state.curve, dir.join(CURVE_FILE))?;
        Checkpoint::from_state(&state).save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainRun { dataset, state })
}

/// Column names and their means over contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub values: Vec<f64>,
}

impl MetricsTable {
    pub fn write(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        w.write_record(self.values.iter().map(|v| v.to_string()))?;
        w.flush().map_err(io_err(""))?;
        Ok(())
    }
}

pub fn default_eval_specs() -> Vec<RewardSpec> {
    ["recall@3", "recall@5", "ndcg@3", "ndcg@5", "mgu", "ild"]
        .iter()
        .map(|s| s.parse().expect("built-in spec"))
        .collect()
}

/// Greedy-decodes every context and averages each metric.
pub fn evaluate(
    params: &PolicyParams,
    dataset: &Dataset,
    specs: &[RewardSpec],
) -> Result<MetricsTable> {
    if params.n_contexts() != dataset.n_contexts() || params.n_items() != dataset.n_items() {
        return Err(Error::Shape(format!(
            "policy is {} contexts x {} items, dataset has {} contexts x {} items",
            params.n_contexts(),
            params.n_items(),
            dataset.n_contexts(),
            dataset.n_items()
        )));
    }
    let mut sums = vec![0.0; specs.len()];
    for (idx, ctx) in dataset.contexts.iter().enumerate() {
        let list = greedy_decode(params, idx)?;
        for (sum, spec) in sums.iter_mut().zip(specs) {
            *sum += reward(spec, &list, ctx, &dataset.catalog)?;
        }
    }
    let n = dataset.n_contexts().max(1) as f64;
    Ok(MetricsTable {
        columns: specs.iter().map(ToString::to_string).collect(),
        values: sums.into_iter().map(|s| s / n).collect(),
    })
}

pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    dataset: &Dataset,
    specs: &[RewardSpec],
) -> Result<MetricsTable> {
    ck.check_compatible(dataset)?;
    evaluate(&ck.params, dataset, specs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BonRow {
    pub n: usize,
    pub mean_reward: f64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BonConfig {
    pub ns: Vec<usize>,
    pub reward: RewardSpec,
    /// Passes over the dataset per `N`.
    pub repeats: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// For each `N`, samples `N` lists per context and pass, keeps the best by
/// reward and averages the chosen rewards. Wall time covers sampling,
/// scoring and selection.
pub fn best_of_n(params: &PolicyParams, dataset: &Dataset, cfg: &BonConfig) -> Result<Vec<BonRow>> {
    if let Some(&bad) = cfg.ns.iter().find(|&&n| n == 0) {
        return param(format!("best-of-n sizes must be >= 1, got {bad}"));
    }
    if params.n_contexts() != dataset.n_contexts() || params.n_items() != dataset.n_items() {
        return Err(Error::Shape(format!(
            "policy is {} contexts x {} items, dataset has {} contexts x {} items",
            params.n_contexts(),
            params.n_items(),
            dataset.n_contexts(),
            dataset.n_items()
        )));
    }
    let mut rows = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut rewards = Vec::with_capacity(n);
        let mut total = 0.0;
        let mut draws = 0usize;
        let start = Instant::now();
        for _ in 0..cfg.repeats {
            for (idx, ctx) in dataset.contexts.iter().enumerate() {
                rewards.clear();
                for _ in 0..n {
                    let r = sample_list(params, idx, cfg.temperature, &mut rng)?;
                    rewards.push(reward(&cfg.reward, &r.list, ctx, &dataset.catalog)?);
                }
                total += rewards[bon_select(&rewards)?];
                draws += 1;
            }
        }
        let wall_time = start.elapsed();
        rows.push(BonRow {
            n,
            mean_reward: if draws == 0 {
                0.0
            } else {
                total / draws as f64
            },
            wall_time,
        });
    }
    Ok(rows)
}

pub fn write_bon_table(rows: &[BonRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "mean_reward", "wall_ms"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.mean_reward.to_string(),
            format!("{:.3}", r.wall_time.as_secs_f64() * 1e3),
        ])?;
    }
    w.flush().map_err(io_err(""))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "tau = 0.5\nmode = \"static\"\nreward = \"fair@5:lambda=0.5\"\n",
        )
        .unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.mode, Mode::Static);
        assert_eq!(cfg.group_size, 16);
        assert_eq!(cfg.m, 128);
        assert_eq!(cfg.estimator(), TargetEstimator::Bayesian { tau: 0.0 });
        assert_eq!(cfg.reward_spec().unwrap(), RewardSpec::fair(5, 0.5));
    }

    #[test]
    fn config_errors_name_the_line() {
        match ExperimentConfig::from_toml_str("tau = 0.5\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_toml_str("mode = \"fast\"").is_err());
    }

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n_items: 12,
            n_genres: 3,
            n_contexts: 3,
            history_len: 3,
            target_len: 3,
            list_len: 3,
            reward: "ndcg@3".into(),
            group_size: 4,
            m: 8,
            steps: 6,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_gives_initial_point_only() {
        let run = train(&ExperimentConfig { steps: 0, ..tiny() }).unwrap();
        assert_eq!(run.curve().len(), 1);
        assert_eq!(run.curve()[0].step, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&tiny()).unwrap();
        let b = train(&tiny()).unwrap();
        assert_eq!(a.curve(), b.curve());
        assert_eq!(a.state.params, b.state.params);
        assert_eq!(a.curve().len(), 7);
    }

    #[test]
    fn eval_table_columns() {
        let run = train(&ExperimentConfig { steps: 0, ..tiny() }).unwrap();
        let t = evaluate(
            &run.state.params,
            &run.dataset,
            &["ndcg@3".parse().unwrap()],
        )
        .unwrap();
        assert_eq!(t.columns, vec!["ndcg@3"]);
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn single_sample_bon_is_plain_sampling() {
        let run = train(&ExperimentConfig { steps: 0, ..tiny() }).unwrap();
        let spec: RewardSpec = "ndcg@3".parse().unwrap();
        let cfg = BonConfig {
            ns: vec![1],
            reward: spec,
            repeats: 5,
            temperature: 1.0,
            seed: 3,
        };
        let rows = best_of_n(&run.state.params, &run.dataset, &cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..5 {
            for (idx, ctx) in run.dataset.contexts.iter().enumerate() {
                let r = sample_list(&run.state.params, idx, 1.0, &mut rng).unwrap();
                total += reward(&spec, &r.list, ctx, &run.dataset.catalog).unwrap();
            }
        }
        assert_eq!(rows[0].mean_reward, total / 15.0);
        assert!(best_of_n(
            &run.state.params,
            &run.dataset,
            &BonConfig { ns: vec![0], ..cfg }
        )
        .is_err());
    }
}
