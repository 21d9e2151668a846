//! Command-line front end.
//!
//! Subcommands: `solve-grid`, `train-ris`, `train-sacris`, `eval`,
//! `export-values`. Each run reads a key=value config file, echoes the
//! fully resolved config into the output directory, and writes its
//! artifacts there. Exit codes: 0 success, 1 invalid configuration or
//! usage, 2 iteration cap reached before convergence, 3 training diverged
//! (the last periodic checkpoint remains on disk).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::env::Env;
use crate::grid::{write_mask_csv, write_value_csv, GridError, GridSolver, StateGrid};
use crate::net::Checkpoint;
use crate::ris::{ris_train_with, RisAgent, TrainError};
use crate::runtime::{MetricsWriter, TrainConfig};
use crate::sacris::{evaluate, sacris_train_with, EvalProtocol, SacRisAgent};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID_CONFIG: i32 = 1;
pub const EXIT_ITERATION_CAP: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser)]
#[command(name = "risrl", version, about = "Robust invariant sets and safe policy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the tabular safety game and export value, set and convergence log
    SolveGrid(RunArgs),
    /// Train the invariant-set actor-critic
    TrainRis(RunArgs),
    /// Train the constrained soft actor-critic
    TrainSacris(RunArgs),
    /// Roll out a trained policy under a disturbance protocol
    Eval(EvalArgs),
    /// Export the learned safety value on the config grid as CSV
    ExportValues(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key=value config file
    #[arg(long)]
    config: PathBuf,
    /// output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// run once per seed, writing into out/seed-N/
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// checkpoint written by train-ris or train-sacris
    #[arg(long)]
    checkpoint: PathBuf,
    /// one of learned-adversary, none, uniform-random
    #[arg(long, default_value = "learned-adversary")]
    protocol: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                return EXIT_INVALID_CONFIG;
            }
            print!("{e}");
            return EXIT_OK;
        }
    };
    let result = match cli.command {
        Command::SolveGrid(a) => for_each_seed(&a, solve_grid),
        Command::TrainRis(a) => for_each_seed(&a, train_ris),
        Command::TrainSacris(a) => for_each_seed(&a, train_sacris),
        Command::Eval(a) => eval_command(&a),
        Command::ExportValues(a) => export_values(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the rayon pool when the RIS_THREADS environment variable is set.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("RIS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            // ignore failure: the global pool can only be built once
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] crate::runtime::RuntimeError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Grid(GridError::IterationCap { .. }) => EXIT_ITERATION_CAP,
            CliError::Train(TrainError::Diverged { .. }) => EXIT_DIVERGED,
            CliError::Io(_) => EXIT_INVALID_CONFIG,
            _ => EXIT_INVALID_CONFIG,
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(TrainConfig, Env), CliError> {
    let mut config = TrainConfig::from_file(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    let env = Env::by_id(&config.env)?;
    Ok((config, env))
}

fn prepare_out(config: &TrainConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    config.write_echo(&out.join("config.txt"))?;
    Ok(())
}

/// Runs `body` once per requested seed, in order; with `--seeds` each run
/// writes into its own `seed-N` subdirectory. The first failing seed stops
/// the sweep.
fn for_each_seed(
    args: &RunArgs,
    body: fn(&TrainConfig, &Env, &Path) -> Result<(), CliError>,
) -> Result<i32, CliError> {
    if args.seed.is_some() && args.seeds.is_some() {
        return Err(CliError::Invalid("--seed and --seeds are mutually exclusive".into()));
    }
    match &args.seeds {
        Some(seeds) => {
            for &seed in seeds {
                let (config, env) = load_config(&args.config, Some(seed))?;
                let out = args.out.join(format!("seed-{seed}"));
                prepare_out(&config, &out)?;
                body(&config, &env, &out)?;
            }
        }
        None => {
            let (config, env) = load_config(&args.config, args.seed)?;
            prepare_out(&config, &args.out)?;
            body(&config, &env, &args.out)?;
        }
    }
    Ok(EXIT_OK)
}

fn config_grid(config: &TrainConfig, env: &Env) -> StateGrid {
    let n_disturb = if config.disturbance { config.n_disturb } else { 1 };
    let grid = StateGrid::for_env(env, &config.grid_nodes, config.n_control, n_disturb);
    if config.disturbance {
        grid
    } else {
        grid.with_disturb_actions(vec![vec![0.0; env.spec.dist_dim()]])
    }
}

fn solve_grid(config: &TrainConfig, env: &Env, out: &Path) -> Result<(), CliError> {
    let grid = config_grid(config, env);
    let solver = GridSolver::for_env(env, grid.clone(), config.gamma_h);
    let result = solver.policy_iteration(config.tol)?;
    let mask = solver.extract_set(&result.value);

    write_value_csv(&grid, &result.value.values, std::fs::File::create(out.join("value.csv"))?)?;
    write_mask_csv(&grid, &mask, std::fs::File::create(out.join("mask.csv"))?)?;
    let mut log = MetricsWriter::to_file(&out.join("convergence.jsonl"))?;
    for entry in &result.log {
        log.write(&json!({
            "iteration": entry.iteration,
            "residual": entry.residual,
            "monotone": entry.monotone,
        }))?;
    }
    log.flush()?;
    Ok(())
}

fn train_ris(config: &TrainConfig, env: &Env, out: &Path) -> Result<(), CliError> {
    let mut metrics = MetricsWriter::to_file(&out.join("metrics.jsonl"))?;
    let ckpt_path = out.join("checkpoint.json");
    let every = config.checkpoint_every_epochs.max(1) * config.steps_per_epoch;
    let result = ris_train_with(env, config, &mut metrics, |step, agent| {
        if step % every == 0 {
            if let Err(e) = agent.to_checkpoint().save(&ckpt_path) {
                eprintln!("warning: checkpoint write failed: {e}");
            }
        }
        false
    });
    let agent = result?;
    agent.to_checkpoint().save(&ckpt_path)?;
    Ok(())
}

fn train_sacris(config: &TrainConfig, env: &Env, out: &Path) -> Result<(), CliError> {
    let mut metrics = MetricsWriter::to_file(&out.join("metrics.jsonl"))?;
    let ckpt_path = out.join("checkpoint.json");
    let every = config.checkpoint_every_epochs.max(1) * config.steps_per_epoch;
    let adversary_zero = !config.disturbance;
    let result = sacris_train_with(env, config, false, adversary_zero, &mut metrics, |step, agent| {
        if step % every == 0 {
            if let Err(e) = agent.to_checkpoint().save(&ckpt_path) {
                eprintln!("warning: checkpoint write failed: {e}");
            }
        }
        false
    });
    let agent = result?;
    agent.to_checkpoint().save(&ckpt_path)?;
    Ok(())
}

fn eval_command(args: &EvalArgs) -> Result<i32, CliError> {
    let (config, env) = load_config(&args.config, args.seed)?;
    let protocol = EvalProtocol::parse(&args.protocol)
        .ok_or_else(|| CliError::Invalid(format!("unknown protocol `{}`", args.protocol)))?;
    std::fs::create_dir_all(&args.out)?;
    config.write_echo(&args.out.join("config.txt"))?;

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut rng = config.rng_stream("eval-init");
    let mut agent = SacRisAgent::new(&env, &config, &mut rng);
    agent.load_checkpoint(&ckpt)?;

    let mut eval_rng = config.rng_stream("eval");
    let episodes = evaluate(
        &env,
        &agent,
        protocol,
        config.eval_episodes,
        config.eval_init_fraction,
        config.max_episode_len,
        &mut eval_rng,
    );

    let mut writer = MetricsWriter::to_file(&args.out.join("episodes.jsonl"))?;
    for (i, m) in episodes.iter().enumerate() {
        writer.write(&json!({
            "episode": i,
            "protocol": protocol.as_str(),
            "episode_return": m.episode_return,
            "episode_violation": m.episode_violation,
            "violation_steps": m.violation_steps,
            "length": m.length,
            "aborted": m.aborted,
        }))?;
    }
    writer.flush()?;

    let returns: Vec<f64> = episodes.iter().map(|m| m.episode_return).collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let half_width = 1.96 * (var / n).sqrt();
    let violating = episodes.iter().filter(|m| m.violation_steps > 0).count();
    let aggregate = json!({
        "protocol": protocol.as_str(),
        "episodes": episodes.len(),
        "mean_return": mean,
        "return_ci95_half_width": half_width,
        "mean_violation": episodes.iter().map(|m| m.episode_violation).sum::<f64>() / n,
        "violating_episodes": violating,
    });
    std::fs::write(&args.out.join("aggregate.json"), serde_json::to_string_pretty(&aggregate)?)?;
    Ok(EXIT_OK)
}

fn export_values(args: &ExportArgs) -> Result<i32, CliError> {
    let (config, env) = load_config(&args.config, None)?;
    std::fs::create_dir_all(&args.out)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut rng = config.rng_stream("export-init");
    let mut agent = RisAgent::new(&env, &config, &mut rng);
    agent.load_checkpoint(&ckpt)?;
    let grid = config_grid(&config, &env);
    let values = agent.learned_values_on_grid(&grid);
    write_value_csv(&grid, &values, std::fs::File::create(args.out.join("value.csv"))?)?;
    Ok(EXIT_OK)
}
