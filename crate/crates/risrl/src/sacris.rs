//! Soft actor-critic constrained to a learned robust invariant set.
//!
//! Trains the reward-seeking stochastic policy jointly with the safety
//! triple from [`crate::ris`]: twin reward critics with targets, a
//! squashed-Gaussian policy, an entropy temperature tuned to a target
//! entropy, and a Lagrange multiplier enforcing nonnegativity of the
//! safety critic at policy actions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::env::Env;
use crate::net::{
    grad_flat, soft_update, standard_normal, AdamState, Checkpoint, Head, Mat, Mlp, NetError, Tape,
};
use crate::ris::{noisy_action, Batch, Collector, RisAgent, TrainError, DIVERGENCE_LIMIT};
use crate::runtime::{
    run_episode, sample_initial_state, AdversaryMode, EpisodeMetrics, MetricsWriter, ReplayBuffer,
    TrainConfig,
};

/// Reward actor-critic state on top of the safety triple.
pub struct SacRisAgent {
    pub safety: RisAgent,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub policy: Mlp,
    pub q1_opt: AdamState,
    pub q2_opt: AdamState,
    pub policy_opt: AdamState,
    pub alpha_opt: AdamState,
    pub log_alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub target_entropy: f64,
    pub lr_lambda: f64,
    /// Ablation switch: keep the multiplier pinned at its initial value.
    pub lambda_frozen: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SacStepLosses {
    pub qh_loss: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
    pub constraint: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl SacRisAgent {
    pub fn new(env: &Env, config: &TrainConfig, rng: &mut ChaCha8Rng) -> SacRisAgent {
        let safety = RisAgent::new(env, config, rng);
        let s = &env.spec;
        let q_in = s.state_dim + s.input_dim() + s.dist_dim();
        let q1 = Mlp::new(q_in, &config.hidden, 1, Head::Linear, rng);
        let q2 = Mlp::new(q_in, &config.hidden, 1, Head::Linear, rng);
        let policy = Mlp::new(
            s.state_dim,
            &config.hidden,
            s.input_dim(),
            Head::SquashedGaussian { low: s.input_low.clone(), high: s.input_high.clone() },
            rng,
        );
        SacRisAgent {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1_opt: AdamState::new(q1.param_count(), config.lr),
            q2_opt: AdamState::new(q2.param_count(), config.lr),
            policy_opt: AdamState::new(policy.param_count(), config.lr),
            alpha_opt: AdamState::new(1, config.lr),
            q1,
            q2,
            policy,
            safety,
            log_alpha: config.alpha_init.ln(),
            lambda: config.lambda_init,
            gamma: config.gamma,
            target_entropy: config.resolved_target_entropy(s.input_dim()),
            lr_lambda: config.lr_lambda,
            lambda_frozen: false,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn q_input(state: &Mat, control: &Mat, disturbance: &Mat) -> Mat {
        let mut data = state.data.clone();
        data.extend_from_slice(&control.data);
        data.extend_from_slice(&disturbance.data);
        Mat::from_vec(state.rows + control.rows + disturbance.rows, state.cols, data)
    }

    /// Soft Bellman target r + gamma (min_j Q_j(x',u',mu(x'); target) -
    /// alpha log pi(u'|x')) with u' the reparameterized sample given `eps`.
    /// Terminal exits do not bootstrap (time-limit truncation does).
    /// No gradient flows through it.
    pub fn q_target(&self, batch: &Batch, eps: &Mat) -> Mat {
        let (u_next, logp) = self.policy.sample_with_noise(&batch.next_state, eps);
        let a_next = self.safety.adversary_action(&batch.next_state);
        let qin = Self::q_input(&batch.next_state, &u_next, &a_next);
        let q1 = self.q1_target.value(&qin);
        let q2 = self.q2_target.value(&qin);
        let alpha = self.alpha();
        let mut out = Mat::zeros(1, batch.size());
        for j in 0..batch.size() {
            let q = q1.data[j].min(q2.data[j]);
            let alive = 1.0 - batch.terminal.data[j];
            out.data[j] = batch.reward.data[j] + alive * self.gamma * (q - alpha * logp.data[j]);
        }
        out
    }

    /// MSE of one live reward critic against a frozen target.
    pub fn q_loss_grad(&self, critic: &Mlp, batch: &Batch, target: &Mat) -> Result<(f64, Vec<f64>), NetError> {
        let mut tape = Tape::new();
        let params = critic.register(&mut tape);
        let input = tape.constant(Self::q_input(&batch.state, &batch.control, &batch.disturbance));
        let pred = critic.trunk_tape(&mut tape, input, Some(&params));
        let t = tape.constant(target.clone());
        let diff = tape.sub(pred, t);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), grad_flat(&grads, &params)))
    }

    /// Reward part of the policy objective:
    /// E{alpha log pi(u|x) - min_j Q_j(x, u, mu(x))}, u reparameterized.
    pub fn policy_loss(&self, batch: &Batch, eps: &Mat) -> f64 {
        let (u, logp) = self.policy.sample_with_noise(&batch.state, eps);
        let a = self.safety.adversary_action(&batch.state);
        let qin = Self::q_input(&batch.state, &u, &a);
        let q1 = self.q1.value(&qin);
        let q2 = self.q2.value(&qin);
        let alpha = self.alpha();
        (0..batch.size())
            .map(|j| alpha * logp.data[j] - q1.data[j].min(q2.data[j]))
            .sum::<f64>()
            / batch.size() as f64
    }

    /// E{Q_h(x, u, mu(x))} at policy samples: the constrained quantity.
    pub fn constraint_value(&self, batch: &Batch, eps: &Mat) -> f64 {
        let (u, _) = self.policy.sample_with_noise(&batch.state, eps);
        let a = self.safety.adversary_action(&batch.state);
        let qh = self.safety.critic.value(&Self::q_input(&batch.state, &u, &a));
        qh.data.iter().sum::<f64>() / batch.size() as f64
    }

    /// Lagrangian policy objective: policy_loss - lambda * constraint.
    pub fn lagrangian(&self, batch: &Batch, eps: &Mat) -> f64 {
        self.policy_loss(batch, eps) - self.lambda * self.constraint_value(batch, eps)
    }

    /// Gradient of the Lagrangian in the policy parameters; both critics
    /// and the safety critic enter frozen. Returns
    /// (policy_loss, constraint, gradient).
    pub fn lagrangian_grad(&self, batch: &Batch, eps: &Mat) -> Result<(f64, f64, Vec<f64>), NetError> {
        let a = self.safety.adversary_action(&batch.state);
        let mut tape = Tape::new();
        let params = self.policy.register(&mut tape);
        let x = tape.constant(batch.state.clone());
        let (u, logp) = self.policy.sample_tape(&mut tape, x, eps, Some(&params));
        let a_node = tape.constant(a);
        let xu = tape.concat_rows(x, u);
        let xua = tape.concat_rows(xu, a_node);
        let q1 = self.q1.trunk_tape(&mut tape, xua, None);
        let q2 = self.q2.trunk_tape(&mut tape, xua, None);
        let qmin = tape.min(q1, q2);
        let qh = self.safety.critic.trunk_tape(&mut tape, xua, None);
        let ent = tape.scale(logp, self.alpha());
        let reward_term = tape.sub(ent, qmin);
        let policy_loss = tape.mean_all(reward_term);
        let constraint = tape.mean_all(qh);
        let penalty = tape.scale(constraint, -self.lambda);
        let loss = tape.add(policy_loss, penalty);
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(policy_loss), tape.scalar(constraint), grad_flat(&grads, &params)))
    }

    /// Temperature objective E{-alpha (log pi(u|x) + H_target)}; its
    /// gradient in log alpha is alpha * E{-(log pi + H_target)}.
    pub fn alpha_loss(&self, batch: &Batch, eps: &Mat) -> (f64, f64) {
        let (_, logp) = self.policy.sample_with_noise(&batch.state, eps);
        let mean_term =
            logp.data.iter().map(|l| l + self.target_entropy).sum::<f64>() / batch.size() as f64;
        let alpha = self.alpha();
        (-alpha * mean_term, -alpha * mean_term)
    }

    fn alpha_update(&mut self, batch: &Batch, eps: &Mat) -> f64 {
        let (loss, grad) = self.alpha_loss(batch, eps);
        let mut p = [self.log_alpha];
        self.alpha_opt.step(&mut p, &[grad]);
        self.log_alpha = p[0];
        loss
    }

    /// Dual ascent on the multiplier: lambda <- max(0, lambda - lr *
    /// E{Q_h}), so lambda grows while policy samples violate the learned
    /// safety constraint.
    pub fn dual_update(&mut self, batch: &Batch, eps: &Mat) -> f64 {
        if !self.lambda_frozen {
            let e = self.constraint_value(batch, eps);
            self.lambda = (self.lambda - self.lr_lambda * e).max(0.0);
        }
        self.lambda
    }

    /// One full gradient step over every learned component. Noise matrices
    /// are drawn from `rng` in a fixed order.
    pub fn update(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<SacStepLosses, NetError> {
        let d = self.policy.output_dim;
        let eps_next = standard_normal(d, batch.size(), rng);
        let eps_pi = standard_normal(d, batch.size(), rng);
        let eps_dual = standard_normal(d, batch.size(), rng);
        self.update_with_noise(batch, &eps_next, &eps_pi, &eps_dual)
    }

    pub fn update_with_noise(
        &mut self,
        batch: &Batch,
        eps_next: &Mat,
        eps_pi: &Mat,
        eps_dual: &Mat,
    ) -> Result<SacStepLosses, NetError> {
        // safety critic (same backup as the invariant-set learner)
        let qh_target = self.safety.qh_target(batch);
        let (qh_loss, g) = self.safety.qh_loss_grad(batch, &qh_target)?;
        let mut flat = self.safety.critic.flatten();
        self.safety.critic_opt.step(&mut flat, &g);
        self.safety.critic.set_from_flat(&flat);

        // twin reward critics against one shared target
        let q_target = self.q_target(batch, eps_next);
        let (l1, g1) = self.q_loss_grad(&self.q1, batch, &q_target)?;
        let (l2, g2) = self.q_loss_grad(&self.q2, batch, &q_target)?;
        let mut flat = self.q1.flatten();
        self.q1_opt.step(&mut flat, &g1);
        self.q1.set_from_flat(&flat);
        let mut flat = self.q2.flatten();
        self.q2_opt.step(&mut flat, &g2);
        self.q2.set_from_flat(&flat);

        // policy against the Lagrangian
        let (policy_loss, constraint, g) = self.lagrangian_grad(batch, eps_pi)?;
        let mut flat = self.policy.flatten();
        self.policy_opt.step(&mut flat, &g);
        self.policy.set_from_flat(&flat);

        // safety protagonist and adversary (zero-sum pair)
        let (_, g) = self.safety.protagonist_loss_grad(batch)?;
        let mut flat = self.safety.protagonist.flatten();
        self.safety.protagonist_opt.step(&mut flat, &g);
        self.safety.protagonist.set_from_flat(&flat);
        if !self.safety.adversary_zero {
            let (_, g) = self.safety.adversary_loss_grad(batch)?;
            let mut flat = self.safety.adversary.flatten();
            self.safety.adversary_opt.step(&mut flat, &g);
            self.safety.adversary.set_from_flat(&flat);
        }

        // temperature, target blends, multiplier
        self.alpha_update(batch, eps_pi);
        soft_update(&mut self.safety.critic_target, &self.safety.critic, self.safety.tau);
        soft_update(&mut self.q1_target, &self.q1, self.safety.tau);
        soft_update(&mut self.q2_target, &self.q2, self.safety.tau);
        self.dual_update(batch, eps_dual);

        Ok(SacStepLosses {
            qh_loss,
            q_loss: 0.5 * (l1 + l2),
            policy_loss,
            constraint,
            lambda: self.lambda,
            alpha: self.alpha(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.safety.to_checkpoint();
        ckpt.nets.insert("q1".into(), self.q1.clone());
        ckpt.nets.insert("q2".into(), self.q2.clone());
        ckpt.nets.insert("q1_target".into(), self.q1_target.clone());
        ckpt.nets.insert("q2_target".into(), self.q2_target.clone());
        ckpt.nets.insert("policy".into(), self.policy.clone());
        ckpt.scalars.insert("gamma".into(), self.gamma);
        ckpt.scalars.insert("log_alpha".into(), self.log_alpha);
        ckpt.scalars.insert("lambda".into(), self.lambda);
        ckpt.scalars.insert("target_entropy".into(), self.target_entropy);
        ckpt
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.safety.load_checkpoint(ckpt)?;
        let get = |name: &str| {
            ckpt.nets
                .get(name)
                .cloned()
                .ok_or_else(|| TrainError::MissingNet(name.to_string()))
        };
        self.q1 = get("q1")?;
        self.q2 = get("q2")?;
        self.q1_target = get("q1_target")?;
        self.q2_target = get("q2_target")?;
        self.policy = get("policy")?;
        if let Some(&v) = ckpt.scalars.get("gamma") {
            self.gamma = v;
        }
        if let Some(&v) = ckpt.scalars.get("log_alpha") {
            self.log_alpha = v;
        }
        if let Some(&v) = ckpt.scalars.get("lambda") {
            self.lambda = v;
        }
        if let Some(&v) = ckpt.scalars.get("target_entropy") {
            self.target_entropy = v;
        }
        Ok(())
    }
}

fn check_divergence(step: usize, losses: &SacStepLosses) -> Result<(), TrainError> {
    for (name, value) in [
        ("qh_loss", losses.qh_loss),
        ("q_loss", losses.q_loss),
        ("policy_loss", losses.policy_loss),
    ] {
        if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { step, loss_name: name, value });
        }
    }
    Ok(())
}

/// Which disturbance source acts during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    LearnedAdversary,
    NoDisturbance,
    UniformRandom,
}

impl EvalProtocol {
    pub fn parse(s: &str) -> Option<EvalProtocol> {
        match s {
            "learned-adversary" => Some(EvalProtocol::LearnedAdversary),
            "none" => Some(EvalProtocol::NoDisturbance),
            "uniform-random" => Some(EvalProtocol::UniformRandom),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalProtocol::LearnedAdversary => "learned-adversary",
            EvalProtocol::NoDisturbance => "none",
            EvalProtocol::UniformRandom => "uniform-random",
        }
    }
}

/// Roll out the deterministic (mean) policy under the chosen disturbance
/// protocol.
pub fn evaluate(
    env: &Env,
    agent: &SacRisAgent,
    protocol: EvalProtocol,
    episodes: usize,
    init_fraction: f64,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<EpisodeMetrics> {
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let start = sample_initial_state(env, init_fraction, rng);
        let policy = |state: &[f64], _rng: &mut ChaCha8Rng| {
            agent.policy.action(&Mat::from_columns(&[state.to_vec()])).column(0)
        };
        let adversary = match protocol {
            EvalProtocol::LearnedAdversary => {
                if agent.safety.adversary_zero {
                    AdversaryMode::None
                } else {
                    AdversaryMode::Learned(&agent.safety.adversary)
                }
            }
            EvalProtocol::NoDisturbance => AdversaryMode::None,
            EvalProtocol::UniformRandom => AdversaryMode::Uniform,
        };
        let (_, metrics) = run_episode(env, start, policy, adversary, max_len, rng);
        out.push(metrics);
    }
    out
}

/// Algorithm-3 training loop. Collects with uniform random actions for the
/// warm-up phase, then with policy samples and noisy adversary actions;
/// runs the configured gradient steps per environment step; writes one
/// JSONL record per epoch with episode statistics averaged over episodes
/// completed during that epoch.
pub fn sacris_train(
    env: &Env,
    config: &TrainConfig,
    metrics: &mut MetricsWriter,
) -> Result<SacRisAgent, TrainError> {
    sacris_train_with(env, config, false, false, metrics, |_, _| false)
}

/// As [`sacris_train`], with ablation switches and an end-of-epoch callback
/// `on_epoch(step, agent)`; returning `true` stops training early.
pub fn sacris_train_with(
    env: &Env,
    config: &TrainConfig,
    lambda_frozen: bool,
    adversary_zero: bool,
    metrics: &mut MetricsWriter,
    mut on_epoch: impl FnMut(usize, &SacRisAgent) -> bool,
) -> Result<SacRisAgent, TrainError> {
    let mut init_rng = config.rng_stream("sacris-init");
    let mut collect_rng = config.rng_stream("sacris-collect");
    let mut batch_rng = config.rng_stream("sacris-batch");
    let mut update_rng = config.rng_stream("sacris-update");
    let mut agent = SacRisAgent::new(env, config, &mut init_rng);
    agent.lambda_frozen = lambda_frozen;
    agent.safety.adversary_zero = adversary_zero;

    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut collector = Collector::new(env, config.init_state_fraction, &mut collect_rng);
    let s = &env.spec;
    let mut last = SacStepLosses {
        qh_loss: 0.0,
        q_loss: 0.0,
        policy_loss: 0.0,
        constraint: 0.0,
        lambda: agent.lambda,
        alpha: agent.alpha(),
    };

    // per-epoch episode statistics
    let mut ep_return = 0.0;
    let mut ep_violation = 0.0;
    let mut ep_violation_steps = 0usize;
    let mut finished: Vec<(f64, f64, usize)> = Vec::new();

    for step in 0..config.total_steps {
        let warmup = step < config.warmup_steps;
        let state_mat = Mat::from_columns(&[collector.state.clone()]);
        let u = if warmup {
            s.input_low
                .iter()
                .zip(&s.input_high)
                .map(|(&lo, &hi)| collect_rng.gen_range(lo..=hi))
                .collect()
        } else {
            let (u, _) = agent.policy.sample(&state_mat, &mut collect_rng);
            u.column(0)
        };
        let a = if adversary_zero {
            vec![0.0; s.dist_dim()]
        } else if warmup {
            s.dist_low
                .iter()
                .zip(&s.dist_high)
                .map(|(&lo, &hi)| collect_rng.gen_range(lo..=hi))
                .collect()
        } else {
            noisy_action(
                &agent.safety.adversary_action(&state_mat).column(0),
                &s.dist_low,
                &s.dist_high,
                config.noise_sigma_fraction,
                &mut collect_rng,
            )
        };
        let (reward, h, done) = collector.step(
            env,
            u,
            a,
            &mut buffer,
            config.max_episode_len,
            config.init_state_fraction,
            &mut collect_rng,
        );
        ep_return += reward;
        if h < 0.0 {
            ep_violation += -h;
            ep_violation_steps += 1;
        }
        if done {
            finished.push((ep_return, ep_violation, ep_violation_steps));
            ep_return = 0.0;
            ep_violation = 0.0;
            ep_violation_steps = 0;
        }

        if !warmup && buffer.len() >= config.batch_size {
            for _ in 0..config.updates_per_step {
                let batch = Batch::from_transitions(&buffer.sample(config.batch_size, &mut batch_rng));
                last = agent.update(&batch, &mut update_rng)?;
                check_divergence(step, &last)?;
            }
        }

        if (step + 1) % config.steps_per_epoch == 0 {
            let n = finished.len().max(1) as f64;
            let (ret, vio, vs) = finished.iter().fold((0.0, 0.0, 0usize), |acc, e| {
                (acc.0 + e.0, acc.1 + e.1, acc.2 + e.2)
            });
            metrics.write(&json!({
                "step": step + 1,
                "episode_return": ret / n,
                "episode_violation": vio / n,
                "violation_steps": vs as f64 / n,
                "lambda": last.lambda,
                "alpha": last.alpha,
                "qh_loss": last.qh_loss,
                "q_loss": last.q_loss,
                "adversary": if adversary_zero { "none" } else { "learned" },
            }))?;
            finished.clear();
            if on_epoch(step + 1, &agent) {
                break;
            }
        }
    }
    metrics.flush()?;
    Ok(agent)
}
