use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use blade_core::envsim::Dataset;
use blade_core::experiment::{
    best_of_n, default_eval_specs, evaluate_checkpoint, gen_data, train, write_bon_table,
    BonConfig, ExperimentConfig, Mode, CHECKPOINT_FILE, CURVE_FILE,
};
use blade_core::grpo::Checkpoint;
use blade_core::metrics::RewardSpec;
use clap::{Args, Parser, Subcommand};

/// Dynamic-quantile list alignment on a synthetic recommendation task.
#[derive(Parser)]
#[command(name = "blade", version)]
struct Cli {
    /// Flat TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (gen-data, eval, bon) or directory (train).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(DataFlags),
    /// Warm-start and train a policy; writes a curve and a checkpoint.
    Train(TrainFlags),
    /// Greedy-decode every context and report mean metrics.
    Eval(EvalFlags),
    /// Best-of-N sampling: mean chosen reward and wall time per N.
    Bon(BonFlags),
}

#[derive(Args)]
struct DataFlags {
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    n_genres: Option<usize>,
    #[arg(long)]
    max_genres_per_item: Option<usize>,
    #[arg(long)]
    n_contexts: Option<usize>,
    #[arg(long)]
    history_len: Option<usize>,
    #[arg(long)]
    target_len: Option<usize>,
    /// Dataset seed; defaults to --seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct SourceFlags {
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Args)]
struct TrainFlags {
    #[command(flatten)]
    source: SourceFlags,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    reward: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    bon_n: Option<u32>,
    /// Reference rollouts per context.
    #[arg(short = 'm', long = "ref-size")]
    m: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta_kl: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    cdf_floor: Option<f64>,
    #[arg(long)]
    list_len: Option<usize>,
    #[arg(long)]
    sft_steps: Option<usize>,
    #[arg(long)]
    sft_lr: Option<f64>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: SourceFlags,
    /// Metric to report; repeatable. Defaults to recall@3, recall@5, ndcg@3,
    /// ndcg@5, mgu and ild.
    #[arg(long = "reward")]
    rewards: Vec<RewardSpec>,
}

#[derive(Args)]
struct BonFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: SourceFlags,
    /// Candidate counts; repeatable.
    #[arg(long = "n", default_values_t = [1, 2, 4])]
    ns: Vec<usize>,
    #[arg(long)]
    reward: Option<String>,
    /// Passes over the dataset per N.
    #[arg(long, default_value_t = 50)]
    repeats: usize,
    #[arg(long)]
    temperature: Option<f64>,
}

macro_rules! apply {
    ($cfg:expr, $flags:expr, $($field:ident),+) => {
        $(if let Some(v) = $flags.$field.clone() { $cfg.$field = v; })+
    };
}

impl DataFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        apply!(
            cfg,
            self,
            n_items,
            n_genres,
            max_genres_per_item,
            n_contexts,
            history_len,
            target_len
        );
        if self.data_seed.is_some() {
            cfg.data_seed = self.data_seed;
        }
    }
}

impl SourceFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.dataset.is_some() {
            cfg.dataset.clone_from(&self.dataset);
        }
        self.data.apply(cfg);
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        self.source.apply(cfg);
        apply!(
            cfg,
            self,
            mode,
            reward,
            steps,
            group_size,
            tau,
            bon_n,
            m,
            lr,
            epsilon,
            beta_kl,
            temperature,
            list_len,
            sft_steps,
            sft_lr
        );
        if self.cdf_floor.is_some() {
            cfg.cdf_floor = self.cdf_floor;
        }
    }
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Writes to `path` when given, otherwise to stdout.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.dataset().context("preparing dataset")
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::GenData(flags) => {
            flags.apply(&mut cfg);
            let path = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("dataset.jsonl"));
            let ds =
                gen_data(&cfg, &path).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "wrote {}: {} contexts, {} items, {} genres",
                path.display(),
                ds.n_contexts(),
                ds.n_items(),
                ds.catalog.n_genres()
            );
        }
        Command::Train(flags) => {
            flags.apply(&mut cfg);
            if cli.out.is_some() {
                cfg.out.clone_from(&cli.out);
            }
            let dir = cfg.out.get_or_insert_with(|| PathBuf::from("run")).clone();
            let run = train(&cfg)?;
            let last = run.curve().last().expect("curve has an initial point");
            println!(
                "trained {} steps ({:?}, reward {}): final eval {:.4}; wrote {} and {}",
                last.step,
                cfg.mode,
                cfg.reward,
                last.eval_metric,
                dir.join(CURVE_FILE).display(),
                dir.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval(flags) => {
            flags.source.apply(&mut cfg);
            let ck = load_checkpoint(&flags.checkpoint)?;
            let ds = dataset(&cfg)?;
            let specs = if flags.rewards.is_empty() {
                default_eval_specs()
            } else {
                flags.rewards.clone()
            };
            let table = evaluate_checkpoint(&ck, &ds, &specs)?;
            table.write(output(cli.out.as_deref())?)?;
        }
        Command::Bon(flags) => {
            flags.source.apply(&mut cfg);
            if let Some(r) = &flags.reward {
                cfg.reward.clone_from(r);
            }
            if let Some(t) = flags.temperature {
                cfg.temperature = t;
            }
            let ck = load_checkpoint(&flags.checkpoint)?;
            let ds = dataset(&cfg)?;
            ck.check_compatible(&ds)?;
            let bon = BonConfig {
                ns: flags.ns.clone(),
                reward: cfg.reward_spec()?,
                repeats: flags.repeats,
                temperature: cfg.temperature,
                seed: cfg.seed,
            };
            let rows = best_of_n(&ck.params, &ds, &bon)?;
            write_bon_table(&rows, output(cli.out.as_deref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
