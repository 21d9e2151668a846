//! Shared training runtime: experience replay, rollouts, metrics,
//! configuration and seeding.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::env::{Env, EnvError};
use crate::net::Mlp;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One experience tuple (x, u, a, r, h, x').
#[derive(Debug, Clone, Serialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub control: Vec<f64>,
    pub disturbance: Vec<f64>,
    pub reward: f64,
    pub h: f64,
    pub next_state: Vec<f64>,
    pub next_h: f64,
    /// Episode ended at this transition (terminal exit or time limit).
    pub done: bool,
    /// The successor left the region of interest (or went non-finite):
    /// value targets must not bootstrap through it. Time-limit truncation
    /// keeps this false.
    pub terminal: bool,
}

/// Bounded FIFO of transitions with uniform with-replacement sampling.
pub struct ReplayBuffer {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0);
        ReplayBuffer { buf: VecDeque::with_capacity(capacity.min(1 << 20)), capacity }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<&Transition> {
        assert!(!self.buf.is_empty(), "cannot sample from an empty replay buffer");
        (0..batch_size)
            .map(|_| &self.buf[rng.gen_range(0..self.buf.len())])
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }
}

/// Per-episode evaluation record.
#[derive(Debug, Clone, Serialize, Default)]
pub struct EpisodeMetrics {
    pub episode_return: f64,
    pub episode_violation: f64,
    pub violation_steps: usize,
    pub length: usize,
    pub aborted: bool,
}

/// Disturbance source during a rollout.
pub enum AdversaryMode<'a> {
    /// No disturbance (zero vector).
    None,
    /// Deterministic output of a learned adversary network.
    Learned(&'a Mlp),
    /// Uniform over the disturbance box.
    Uniform,
}

/// Uniform draw from the central `fraction` sub-box of the state box.
pub fn sample_initial_state(env: &Env, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    env.spec
        .state_low
        .iter()
        .zip(&env.spec.state_high)
        .map(|(&lo, &hi)| {
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo) * fraction;
            rng.gen_range(mid - half..=mid + half)
        })
        .collect()
}

fn in_region(env: &Env, state: &[f64]) -> bool {
    state
        .iter()
        .zip(env.spec.state_low.iter().zip(&env.spec.state_high))
        .all(|(x, (&lo, &hi))| *x >= lo && *x <= hi)
}

/// Roll out one episode. The policy closure receives the state and the
/// rollout RNG stream. Terminates at `max_len` or when the state leaves
/// the region of interest; a non-finite state aborts the episode with
/// `aborted` set. Violation accrues over every visited state including
/// the terminal one.
pub fn run_episode<F>(
    env: &Env,
    start: Vec<f64>,
    mut policy: F,
    adversary: AdversaryMode,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Transition>, EpisodeMetrics)
where
    F: FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
{
    let mut metrics = EpisodeMetrics::default();
    let mut trajectory = Vec::new();
    let mut state = start;
    let record = |m: &mut EpisodeMetrics, h: f64| {
        if h < 0.0 {
            m.episode_violation += -h;
            m.violation_steps += 1;
        }
    };
    record(&mut metrics, env.h(&state));
    for step in 0..max_len {
        let u = policy(&state, rng);
        let a = match &adversary {
            AdversaryMode::None => vec![0.0; env.spec.dist_dim()],
            AdversaryMode::Learned(mu) => {
                mu.action(&crate::net::Mat::from_columns(&[state.clone()])).column(0)
            }
            AdversaryMode::Uniform => env
                .spec
                .dist_low
                .iter()
                .zip(&env.spec.dist_high)
                .map(|(&lo, &hi)| rng.gen_range(lo..=hi))
                .collect(),
        };
        let next = match env.step(&state, &u, &a) {
            Ok(next) if next.iter().all(|v| v.is_finite()) => next,
            _ => {
                metrics.aborted = true;
                break;
            }
        };
        let h = env.h(&state);
        let reward = env.reward(&state, &u, &next);
        metrics.episode_return += reward;
        metrics.length = step + 1;
        let terminal = !in_region(env, &next);
        let done = step + 1 == max_len || terminal;
        trajectory.push(Transition {
            state: state.clone(),
            control: u,
            disturbance: a,
            reward,
            h,
            next_state: next.clone(),
            next_h: env.h(&next),
            done,
            terminal,
        });
        record(&mut metrics, env.h(&next));
        state = next;
        if done {
            break;
        }
    }
    (trajectory, metrics)
}

/// Recompute the violation magnitude of a stored trajectory from raw
/// states (consistency oracle for [`EpisodeMetrics`]).
pub fn recompute_violation(env: &Env, trajectory: &[Transition]) -> (f64, usize) {
    let mut total = 0.0;
    let mut steps = 0;
    let mut states: Vec<&Vec<f64>> = trajectory.iter().map(|t| &t.state).collect();
    if let Some(last) = trajectory.last() {
        states.push(&last.next_state);
    }
    for s in states {
        let h = env.h(s);
        if h < 0.0 {
            total += -h;
            steps += 1;
        }
    }
    (total, steps)
}

/// All hyperparameters of a run. Loaded from flat `key=value` files;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: String,
    pub gamma: f64,
    pub gamma_h: f64,
    pub alpha_init: f64,
    /// Target entropy; `None` resolves to -dim(U) at agent build.
    pub target_entropy: Option<f64>,
    pub lambda_init: f64,
    pub tau: f64,
    pub lr: f64,
    pub lr_lambda: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub max_episode_len: usize,
    pub total_steps: usize,
    pub steps_per_epoch: usize,
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub init_state_fraction: f64,
    pub eval_init_fraction: f64,
    pub eval_episodes: usize,
    pub noise_sigma_fraction: f64,
    pub checkpoint_every_epochs: usize,
    pub grid_nodes: Vec<usize>,
    pub n_control: usize,
    pub n_disturb: usize,
    pub disturbance: bool,
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            env: "double_integrator".into(),
            gamma: 0.99,
            gamma_h: 0.99,
            alpha_init: 0.2,
            target_entropy: None,
            lambda_init: 50.0,
            tau: 0.005,
            lr: 3e-4,
            lr_lambda: 1e-4,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            max_episode_len: 500,
            total_steps: 200_000,
            steps_per_epoch: 2_000,
            warmup_steps: 5_000,
            updates_per_step: 1,
            hidden: vec![64, 64],
            seed: 0,
            init_state_fraction: 0.5,
            eval_init_fraction: 0.5,
            eval_episodes: 20,
            noise_sigma_fraction: 0.1,
            checkpoint_every_epochs: 10,
            grid_nodes: vec![101, 101],
            n_control: 11,
            n_disturb: 11,
            disturbance: true,
            tol: 1e-6,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, RuntimeError> {
    value
        .parse()
        .map_err(|_| RuntimeError::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, RuntimeError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl TrainConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), RuntimeError> {
        match key {
            "env" => self.env = value.to_string(),
            "gamma" => self.gamma = parse(key, value)?,
            "gamma_h" => self.gamma_h = parse(key, value)?,
            "alpha_init" => self.alpha_init = parse(key, value)?,
            "target_entropy" => {
                self.target_entropy = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "lambda_init" => self.lambda_init = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_lambda" => self.lr_lambda = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "max_episode_len" => self.max_episode_len = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "updates_per_step" => self.updates_per_step = parse(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "init_state_fraction" => self.init_state_fraction = parse(key, value)?,
            "eval_init_fraction" => self.eval_init_fraction = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "noise_sigma_fraction" => self.noise_sigma_fraction = parse(key, value)?,
            "checkpoint_every_epochs" => self.checkpoint_every_epochs = parse(key, value)?,
            "grid_nodes" => self.grid_nodes = parse_list(key, value)?,
            "n_control" => self.n_control = parse(key, value)?,
            "n_disturb" => self.n_disturb = parse(key, value)?,
            "disturbance" => {
                self.disturbance = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    other => {
                        return Err(RuntimeError::Config(format!(
                            "invalid value `{other}` for key `disturbance` (use on/off)"
                        )))
                    }
                }
            }
            "tol" => self.tol = parse(key, value)?,
            other => return Err(RuntimeError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a flat `key=value` file. Blank lines and `#` comments allowed.
    pub fn from_file(path: &Path) -> Result<TrainConfig, RuntimeError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<TrainConfig, RuntimeError> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| RuntimeError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        let check = |ok: bool, msg: &str| {
            if ok { Ok(()) } else { Err(RuntimeError::Config(msg.to_string())) }
        };
        check(self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0,1)")?;
        check(self.gamma_h > 0.0 && self.gamma_h < 1.0, "gamma_h must lie in (0,1)")?;
        check(self.lr > 0.0 && self.lr_lambda > 0.0, "learning rates must be positive")?;
        check(self.lambda_init >= 0.0, "lambda_init must be nonnegative")?;
        check(self.alpha_init > 0.0, "alpha_init must be positive")?;
        check(self.tau > 0.0 && self.tau <= 1.0, "tau must lie in (0,1]")?;
        check(self.tol > 0.0, "tol must be positive")?;
        Ok(())
    }

    /// Resolved target entropy: -dim(U) unless configured explicitly.
    pub fn resolved_target_entropy(&self, input_dim: usize) -> f64 {
        self.target_entropy.unwrap_or(-(input_dim as f64))
    }

    /// Every effective key in a stable order, for echoing into run output
    /// directories. Re-parsing the echo reproduces this config.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let join_usize = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("env".into(), self.env.clone()),
            ("gamma".into(), self.gamma.to_string()),
            ("gamma_h".into(), self.gamma_h.to_string()),
            ("alpha_init".into(), self.alpha_init.to_string()),
            (
                "target_entropy".into(),
                self.target_entropy.map_or("auto".into(), |v| v.to_string()),
            ),
            ("lambda_init".into(), self.lambda_init.to_string()),
            ("tau".into(), self.tau.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lr_lambda".into(), self.lr_lambda.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("buffer_capacity".into(), self.buffer_capacity.to_string()),
            ("max_episode_len".into(), self.max_episode_len.to_string()),
            ("total_steps".into(), self.total_steps.to_string()),
            ("steps_per_epoch".into(), self.steps_per_epoch.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("updates_per_step".into(), self.updates_per_step.to_string()),
            ("hidden".into(), join_usize(&self.hidden)),
            ("seed".into(), self.seed.to_string()),
            ("init_state_fraction".into(), self.init_state_fraction.to_string()),
            ("eval_init_fraction".into(), self.eval_init_fraction.to_string()),
            ("eval_episodes".into(), self.eval_episodes.to_string()),
            ("noise_sigma_fraction".into(), self.noise_sigma_fraction.to_string()),
            ("checkpoint_every_epochs".into(), self.checkpoint_every_epochs.to_string()),
            ("grid_nodes".into(), join_usize(&self.grid_nodes)),
            ("n_control".into(), self.n_control.to_string()),
            ("n_disturb".into(), self.n_disturb.to_string()),
            ("disturbance".into(), if self.disturbance { "on".into() } else { "off".into() }),
            ("tol".into(), self.tol.to_string()),
        ]
    }

    pub fn write_echo(&self, path: &Path) -> Result<(), RuntimeError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (k, v) in self.to_key_values() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }

    /// Dedicated RNG stream for a named component, decorrelated from other
    /// components but fully determined by (seed, name).
    pub fn rng_stream(&self, name: &str) -> ChaCha8Rng {
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in name.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ hash)
    }
}

/// JSONL sink for per-epoch and per-episode metric records.
pub struct MetricsWriter {
    out: Box<dyn Write>,
}

impl MetricsWriter {
    pub fn to_file(path: &Path) -> Result<MetricsWriter, RuntimeError> {
        Ok(MetricsWriter { out: Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)) })
    }

    pub fn sink() -> MetricsWriter {
        MetricsWriter { out: Box::new(std::io::sink()) }
    }

    pub fn write(&mut self, record: &serde_json::Value) -> Result<(), RuntimeError> {
        serde_json::to_writer(&mut self.out, record).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), RuntimeError> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::double_integrator;

    fn transition(x: f64) -> Transition {
        Transition {
            state: vec![x, 0.0],
            control: vec![0.0],
            disturbance: vec![0.0],
            reward: 0.0,
            h: 2.0 - x.abs(),
            next_state: vec![x, 0.0],
            next_h: 2.0 - x.abs(),
            done: false,
            terminal: false,
        }
    }

    #[test]
    fn push_and_fifo_eviction() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(transition(1.0));
        assert_eq!(buf.len(), 1);
        buf.push(transition(2.0));
        buf.push(transition(3.0));
        assert_eq!(buf.len(), 2);
        let contents: Vec<f64> = buf.iter().map(|t| t.state[0]).collect();
        assert_eq!(contents, vec![2.0, 3.0]);
    }

    #[test]
    fn sample_from_singleton_buffer() {
        let mut buf = ReplayBuffer::new(10);
        buf.push(transition(5.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in buf.sample(32, &mut rng) {
            assert_eq!(t.state[0], 5.0);
        }
    }

    #[test]
    fn sample_deterministic_and_empty_batch() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..5 {
            buf.push(transition(i as f64));
        }
        let batch = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            buf.sample(16, &mut rng).iter().map(|t| t.state[0]).collect::<Vec<_>>()
        };
        assert_eq!(batch(3), batch(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(0, &mut rng).is_empty());
    }

    #[test]
    fn sample_uniformity_binomial_bound() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(transition(0.0));
        buf.push(transition(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let ones: usize = buf.sample(n, &mut rng).iter().filter(|t| t.state[0] == 1.0).count();
        // 5 sigma of Binomial(n, 1/2)
        let sigma = 0.5 * (n as f64).sqrt();
        assert!((ones as f64 - n as f64 / 2.0).abs() < 5.0 * sigma);
    }

    #[test]
    fn equilibrium_episode_no_violation() {
        let env = double_integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (traj, metrics) = run_episode(
            &env,
            vec![0.0, 0.0],
            |_s, _r| vec![0.0],
            AdversaryMode::None,
            50,
            &mut rng,
        );
        assert_eq!(metrics.length, 50);
        assert_eq!(metrics.violation_steps, 0);
        assert_eq!(metrics.episode_violation, 0.0);
        assert!(traj.iter().all(|t| t.state == vec![0.0, 0.0]));
        // fixed-point return: 50 * r(0,0)
        let r = env.reward(&[0.0, 0.0], &[0.0], &[0.0, 0.0]);
        assert!((metrics.episode_return - 50.0 * r).abs() < 1e-12);
    }

    #[test]
    fn episode_terminates_when_leaving_region() {
        let env = double_integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (traj, metrics) = run_episode(
            &env,
            vec![1.99, 2.0],
            |_s, _r| vec![1.0],
            AdversaryMode::Uniform,
            500,
            &mut rng,
        );
        assert!(metrics.length < 500);
        assert!(traj.last().unwrap().done);
    }

    #[test]
    fn metric_consistency_with_recomputation() {
        let env = double_integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (traj, metrics) = run_episode(
            &env,
            vec![1.9, 1.9],
            |_s, r| vec![r.gen_range(-1.0..1.0)],
            AdversaryMode::Uniform,
            200,
            &mut rng,
        );
        let (violation, steps) = recompute_violation(&env, &traj);
        assert!((violation - metrics.episode_violation).abs() < 1e-12);
        assert_eq!(steps, metrics.violation_steps);
        assert_eq!(metrics.violation_steps == 0, metrics.episode_violation == 0.0);
    }

    #[test]
    fn rollouts_are_reproducible() {
        let env = double_integrator();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let start = sample_initial_state(&env, 0.5, &mut rng);
            let (traj, metrics) = run_episode(
                &env,
                start,
                |_s, r| vec![r.gen_range(-1.0..1.0)],
                AdversaryMode::Uniform,
                100,
                &mut rng,
            );
            (traj.len(), metrics.episode_return, metrics.episode_violation)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn initial_state_within_central_fraction() {
        let env = double_integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let s = sample_initial_state(&env, 0.5, &mut rng);
            assert!(s.iter().all(|&x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn config_round_trip_and_unknown_key() {
        let cfg = TrainConfig::from_str_contents("env=cartpole\ngamma=0.95\nhidden=32,32\n# comment\n").unwrap();
        assert_eq!(cfg.env, "cartpole");
        assert_eq!(cfg.gamma, 0.95);
        assert_eq!(cfg.hidden, vec![32, 32]);

        let echo: String = cfg
            .to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let reparsed = TrainConfig::from_str_contents(&echo).unwrap();
        assert_eq!(reparsed, cfg);

        assert!(TrainConfig::from_str_contents("bogus_key=1\n").is_err());
        assert!(TrainConfig::from_str_contents("gamma=1.5\n").is_err());
    }

    #[test]
    fn rng_streams_are_named_and_stable() {
        let cfg = TrainConfig::default();
        let a: u64 = cfg.rng_stream("collect").gen();
        let b: u64 = cfg.rng_stream("eval").gen();
        assert_ne!(a, b);
        let a2: u64 = cfg.rng_stream("collect").gen();
        assert_eq!(a, a2);
    }
}
