//! Actor-critic synthesis of robust invariant sets.
//!
//! Learns a state-action safety critic Q_h together with a deterministic
//! protagonist pi_h (maximizing worst-case safety) and a deterministic
//! adversary mu (minimizing it) from replayed transitions. The critic's
//! zero-superlevel set V_h(x) = Q_h(x, pi_h(x), mu(x)) >= 0 approximates
//! the maximal robust invariant set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::env::Env;
use crate::grid::{SetMask, StateGrid};
use crate::net::{grad_flat, soft_update, AdamState, Checkpoint, Head, Mat, Mlp, NetError, Tape};
use crate::runtime::{ReplayBuffer, RuntimeError, TrainConfig, Transition, MetricsWriter};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {loss_name} = {value:e}")]
    Diverged { step: usize, loss_name: &'static str, value: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("checkpoint is missing network `{0}`")]
    MissingNet(String),
}

pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Columns of a sampled batch as (feature x batch) matrices.
pub struct Batch {
    pub state: Mat,
    pub control: Mat,
    pub disturbance: Mat,
    pub reward: Mat,
    pub h: Mat,
    pub next_state: Mat,
    pub next_h: Mat,
    /// 1.0 where the successor left the region (no bootstrapping), else 0.0.
    pub terminal: Mat,
}

impl Batch {
    pub fn from_transitions(batch: &[&Transition]) -> Batch {
        Batch {
            state: Mat::from_columns(&batch.iter().map(|t| t.state.clone()).collect::<Vec<_>>()),
            control: Mat::from_columns(&batch.iter().map(|t| t.control.clone()).collect::<Vec<_>>()),
            disturbance: Mat::from_columns(&batch.iter().map(|t| t.disturbance.clone()).collect::<Vec<_>>()),
            reward: Mat::from_columns(&batch.iter().map(|t| vec![t.reward]).collect::<Vec<_>>()),
            h: Mat::from_columns(&batch.iter().map(|t| vec![t.h]).collect::<Vec<_>>()),
            next_state: Mat::from_columns(&batch.iter().map(|t| t.next_state.clone()).collect::<Vec<_>>()),
            next_h: Mat::from_columns(&batch.iter().map(|t| vec![t.next_h]).collect::<Vec<_>>()),
            terminal: Mat::from_columns(
                &batch.iter().map(|t| vec![t.terminal as u8 as f64]).collect::<Vec<_>>(),
            ),
        }
    }

    pub fn size(&self) -> usize {
        self.state.cols
    }
}

/// Safety critic, protagonist and adversary with optimizer and target state.
pub struct RisAgent {
    pub env_id: String,
    pub critic: Mlp,
    pub critic_target: Mlp,
    pub protagonist: Mlp,
    pub adversary: Mlp,
    pub critic_opt: AdamState,
    pub protagonist_opt: AdamState,
    pub adversary_opt: AdamState,
    pub gamma_h: f64,
    pub tau: f64,
    /// When set, the adversary contributes zero disturbance everywhere
    /// (standard, non-robust invariant set).
    pub adversary_zero: bool,
}

impl RisAgent {
    pub fn new(env: &Env, config: &TrainConfig, rng: &mut ChaCha8Rng) -> RisAgent {
        let s = &env.spec;
        let critic_in = s.state_dim + s.input_dim() + s.dist_dim();
        let critic = Mlp::new(critic_in, &config.hidden, 1, Head::Linear, rng);
        let protagonist = Mlp::new(
            s.state_dim,
            &config.hidden,
            s.input_dim(),
            Head::TanhBounded { low: s.input_low.clone(), high: s.input_high.clone() },
            rng,
        );
        let adversary = Mlp::new(
            s.state_dim,
            &config.hidden,
            s.dist_dim(),
            Head::TanhBounded { low: s.dist_low.clone(), high: s.dist_high.clone() },
            rng,
        );
        RisAgent {
            env_id: env.id.clone(),
            critic_target: critic.clone(),
            critic_opt: AdamState::new(critic.param_count(), config.lr),
            protagonist_opt: AdamState::new(protagonist.param_count(), config.lr),
            adversary_opt: AdamState::new(adversary.param_count(), config.lr),
            critic,
            protagonist,
            adversary,
            gamma_h: config.gamma_h,
            tau: config.tau,
            adversary_zero: false,
        }
    }

    /// Deterministic adversary output, respecting the frozen-at-zero flag.
    pub fn adversary_action(&self, states: &Mat) -> Mat {
        if self.adversary_zero {
            Mat::zeros(self.adversary.output_dim, states.cols)
        } else {
            self.adversary.action(states)
        }
    }

    fn critic_input(state: &Mat, control: &Mat, disturbance: &Mat) -> Mat {
        let mut data = state.data.clone();
        data.extend_from_slice(&control.data);
        data.extend_from_slice(&disturbance.data);
        Mat::from_vec(state.rows + control.rows + disturbance.rows, state.cols, data)
    }

    /// Bootstrap target (1-gamma_h) h(x) + gamma_h min{h(x), V(x')};
    /// V(x') is the target critic at the policies' actions, except at
    /// terminal successors where it is grounded at h(x') (the net never
    /// sees training data outside the region, so extrapolating there would
    /// let unsafe exits look safe). No gradient flows through it.
    pub fn qh_target(&self, batch: &Batch) -> Mat {
        let u_next = self.protagonist.action(&batch.next_state);
        let a_next = self.adversary_action(&batch.next_state);
        let q_next = self
            .critic_target
            .value(&Self::critic_input(&batch.next_state, &u_next, &a_next));
        let mut out = Mat::zeros(1, batch.size());
        for j in 0..batch.size() {
            let h = batch.h.data[j];
            let succ = if batch.terminal.data[j] != 0.0 { batch.next_h.data[j] } else { q_next.data[j] };
            out.data[j] = (1.0 - self.gamma_h) * h + self.gamma_h * h.min(succ);
        }
        out
    }

    /// Mean squared error of the live critic at stored (x,u,a) against the
    /// frozen bootstrap target; differentiable in the critic only.
    /// Returns (loss, critic gradient).
    pub fn qh_loss_grad(&self, batch: &Batch, target: &Mat) -> Result<(f64, Vec<f64>), NetError> {
        let mut tape = Tape::new();
        let params = self.critic.register(&mut tape);
        let input = tape.constant(Self::critic_input(&batch.state, &batch.control, &batch.disturbance));
        let pred = self.critic.trunk_tape(&mut tape, input, Some(&params));
        let t = tape.constant(target.clone());
        let diff = tape.sub(pred, t);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), grad_flat(&grads, &params)))
    }

    pub fn qh_loss(&self, batch: &Batch) -> f64 {
        let target = self.qh_target(batch);
        let pred = self
            .critic
            .value(&Self::critic_input(&batch.state, &batch.control, &batch.disturbance));
        pred.data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / batch.size() as f64
    }

    /// -E{Q_h(x, pi_h(x), mu(x))}: gradient flows through the protagonist's
    /// action only (critic and adversary frozen).
    pub fn protagonist_loss_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>), NetError> {
        let a = self.adversary_action(&batch.state);
        let mut tape = Tape::new();
        let params = self.protagonist.register(&mut tape);
        let x = tape.constant(batch.state.clone());
        let u = self.protagonist.action_tape(&mut tape, x, Some(&params));
        let a_node = tape.constant(a);
        let xu = tape.concat_rows(x, u);
        let xua = tape.concat_rows(xu, a_node);
        let q = self.critic.trunk_tape(&mut tape, xua, None);
        let mean_q = tape.mean_all(q);
        let loss = tape.scale(mean_q, -1.0);
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), grad_flat(&grads, &params)))
    }

    pub fn protagonist_loss(&self, batch: &Batch) -> f64 {
        let u = self.protagonist.action(&batch.state);
        let a = self.adversary_action(&batch.state);
        let q = self.critic.value(&Self::critic_input(&batch.state, &u, &a));
        -q.data.iter().sum::<f64>() / batch.size() as f64
    }

    /// +E{Q_h(x, pi_h(x), mu(x))}: the exact negation of the protagonist
    /// objective, with gradient through the adversary's action only.
    pub fn adversary_loss_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>), NetError> {
        let u = self.protagonist.action(&batch.state);
        let mut tape = Tape::new();
        let params = self.adversary.register(&mut tape);
        let x = tape.constant(batch.state.clone());
        let a = self.adversary.action_tape(&mut tape, x, Some(&params));
        let u_node = tape.constant(u);
        let xu = tape.concat_rows(x, u_node);
        let xua = tape.concat_rows(xu, a);
        let q = self.critic.trunk_tape(&mut tape, xua, None);
        let loss = tape.mean_all(q);
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), grad_flat(&grads, &params)))
    }

    pub fn adversary_loss(&self, batch: &Batch) -> f64 {
        -self.protagonist_loss(batch)
    }

    /// One gradient step: critic, protagonist, adversary, target blend.
    pub fn update(&mut self, batch: &Batch) -> Result<StepLosses, NetError> {
        let target = self.qh_target(batch);
        let (qh_loss, g) = self.qh_loss_grad(batch, &target)?;
        let mut flat = self.critic.flatten();
        self.critic_opt.step(&mut flat, &g);
        self.critic.set_from_flat(&flat);

        let (protagonist_loss, g) = self.protagonist_loss_grad(batch)?;
        let mut flat = self.protagonist.flatten();
        self.protagonist_opt.step(&mut flat, &g);
        self.protagonist.set_from_flat(&flat);

        let adversary_loss = if self.adversary_zero {
            0.0
        } else {
            let (loss, g) = self.adversary_loss_grad(batch)?;
            let mut flat = self.adversary.flatten();
            self.adversary_opt.step(&mut flat, &g);
            self.adversary.set_from_flat(&flat);
            loss
        };

        soft_update(&mut self.critic_target, &self.critic, self.tau);
        Ok(StepLosses { qh_loss, protagonist_loss, adversary_loss })
    }

    /// Learned safety value V_h(x) = Q_h(x, pi_h(x), mu(x)) at a batch of
    /// states.
    pub fn learned_value(&self, states: &Mat) -> Vec<f64> {
        let u = self.protagonist.action(states);
        let a = self.adversary_action(states);
        self.critic.value(&Self::critic_input(states, &u, &a)).data
    }

    /// Zero-superlevel set of the learned safety value on a grid.
    pub fn learned_mask(&self, grid: &StateGrid) -> SetMask {
        let values = self.learned_values_on_grid(grid);
        SetMask { inside: values.iter().map(|&v| v >= 0.0).collect() }
    }

    pub fn learned_values_on_grid(&self, grid: &StateGrid) -> Vec<f64> {
        let nodes = grid.node_count();
        // chunked to bound matrix width
        let mut values = Vec::with_capacity(nodes);
        let chunk = 4096;
        let mut start = 0;
        while start < nodes {
            let end = (start + chunk).min(nodes);
            let states: Vec<Vec<f64>> = (start..end).map(|i| grid.node_state(i)).collect();
            values.extend(self.learned_value(&Mat::from_columns(&states)));
            start = end;
        }
        values
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(&self.env_id);
        ckpt.nets.insert("qh_critic".into(), self.critic.clone());
        ckpt.nets.insert("qh_critic_target".into(), self.critic_target.clone());
        ckpt.nets.insert("protagonist".into(), self.protagonist.clone());
        ckpt.nets.insert("adversary".into(), self.adversary.clone());
        ckpt.scalars.insert("gamma_h".into(), self.gamma_h);
        ckpt.scalars.insert("tau".into(), self.tau);
        ckpt.scalars.insert("adversary_zero".into(), self.adversary_zero as u8 as f64);
        ckpt
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let get = |name: &str| {
            ckpt.nets
                .get(name)
                .cloned()
                .ok_or_else(|| TrainError::MissingNet(name.to_string()))
        };
        self.critic = get("qh_critic")?;
        self.critic_target = get("qh_critic_target")?;
        self.protagonist = get("protagonist")?;
        self.adversary = get("adversary")?;
        if let Some(&g) = ckpt.scalars.get("gamma_h") {
            self.gamma_h = g;
        }
        self.adversary_zero = ckpt.scalars.get("adversary_zero").copied().unwrap_or(0.0) != 0.0;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub qh_loss: f64,
    pub protagonist_loss: f64,
    pub adversary_loss: f64,
}

fn check_divergence(step: usize, losses: &StepLosses) -> Result<(), TrainError> {
    for (name, value) in [
        ("qh_loss", losses.qh_loss),
        ("protagonist_loss", losses.protagonist_loss),
        ("adversary_loss", losses.adversary_loss),
    ] {
        if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { step, loss_name: name, value });
        }
    }
    Ok(())
}

/// Clipped Gaussian exploration noise around a deterministic action.
pub fn noisy_action(
    action: &[f64],
    low: &[f64],
    high: &[f64],
    sigma_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    action
        .iter()
        .zip(low.iter().zip(high))
        .map(|(&a, (&lo, &hi))| {
            let sigma = sigma_fraction * (hi - lo);
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let noise = sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (a + noise).clamp(lo, hi)
        })
        .collect()
}

/// Shared collection state: steps the environment with the given action
/// pair, resets on episode end, pushes to the buffer.
pub struct Collector {
    pub state: Vec<f64>,
    pub steps_in_episode: usize,
}

impl Collector {
    pub fn new(env: &Env, fraction: f64, rng: &mut ChaCha8Rng) -> Collector {
        Collector { state: crate::runtime::sample_initial_state(env, fraction, rng), steps_in_episode: 0 }
    }

    pub fn step(
        &mut self,
        env: &Env,
        u: Vec<f64>,
        a: Vec<f64>,
        buffer: &mut ReplayBuffer,
        max_len: usize,
        fraction: f64,
        rng: &mut ChaCha8Rng,
    ) -> (f64, f64, bool) {
        let next = env.step(&self.state, &u, &a).expect("finite state during collection");
        let h = env.h(&self.state);
        let reward = env.reward(&self.state, &u, &next);
        self.steps_in_episode += 1;
        let left = next
            .iter()
            .zip(env.spec.state_low.iter().zip(&env.spec.state_high))
            .any(|(x, (&lo, &hi))| *x < lo || *x > hi);
        let terminal = left || next.iter().any(|v| !v.is_finite());
        let done = self.steps_in_episode >= max_len || terminal;
        buffer.push(Transition {
            state: std::mem::take(&mut self.state),
            control: u,
            disturbance: a,
            reward,
            h,
            next_state: next.clone(),
            next_h: env.h(&next),
            done,
            terminal,
        });
        if done {
            self.state = crate::runtime::sample_initial_state(env, fraction, rng);
            self.steps_in_episode = 0;
        } else {
            self.state = next;
        }
        (reward, h, done)
    }
}

/// Algorithm-2 training loop: per environment step, collect one transition
/// with exploration noise on both deterministic policies, then run the
/// configured number of gradient steps. Emits one JSONL record per epoch.
pub fn ris_train(env: &Env, config: &TrainConfig, metrics: &mut MetricsWriter) -> Result<RisAgent, TrainError> {
    ris_train_with(env, config, metrics, |_, _| false)
}

/// As [`ris_train`], with an end-of-epoch callback `on_epoch(step, agent)`;
/// returning `true` stops training early.
pub fn ris_train_with(
    env: &Env,
    config: &TrainConfig,
    metrics: &mut MetricsWriter,
    mut on_epoch: impl FnMut(usize, &RisAgent) -> bool,
) -> Result<RisAgent, TrainError> {
    let mut init_rng = config.rng_stream("ris-init");
    let mut collect_rng = config.rng_stream("ris-collect");
    let mut batch_rng = config.rng_stream("ris-batch");
    let mut agent = RisAgent::new(env, config, &mut init_rng);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut collector = Collector::new(env, config.init_state_fraction, &mut collect_rng);
    let s = &env.spec;
    let mut last = StepLosses { qh_loss: 0.0, protagonist_loss: 0.0, adversary_loss: 0.0 };

    for step in 0..config.total_steps {
        let state_mat = Mat::from_columns(&[collector.state.clone()]);
        let u = noisy_action(
            &agent.protagonist.action(&state_mat).column(0),
            &s.input_low,
            &s.input_high,
            config.noise_sigma_fraction,
            &mut collect_rng,
        );
        let a = if agent.adversary_zero {
            vec![0.0; s.dist_dim()]
        } else {
            noisy_action(
                &agent.adversary_action(&state_mat).column(0),
                &s.dist_low,
                &s.dist_high,
                config.noise_sigma_fraction,
                &mut collect_rng,
            )
        };
        collector.step(env, u, a, &mut buffer, config.max_episode_len, config.init_state_fraction, &mut collect_rng);

        if buffer.len() >= config.batch_size {
            for _ in 0..config.updates_per_step {
                let batch = Batch::from_transitions(&buffer.sample(config.batch_size, &mut batch_rng));
                last = agent.update(&batch)?;
                check_divergence(step, &last)?;
            }
        }

        if (step + 1) % config.steps_per_epoch == 0 {
            metrics.write(&json!({
                "step": step + 1,
                "qh_loss": last.qh_loss,
                "protagonist_loss": last.protagonist_loss,
                "adversary_loss": last.adversary_loss,
                "buffer_size": buffer.len(),
            }))?;
            if on_epoch(step + 1, &agent) {
                break;
            }
        }
    }
    metrics.flush()?;
    Ok(agent)
}
