//! Disturbed discrete-time control systems and their constraint functions.
//!
//! A system is `x' = f(x, u, a)` where `u` is the protagonist's control
//! input and `a` an adversarial disturbance, both box-bounded. Safety is
//! encoded by a constraint function `h` whose zero-superlevel set is the
//! safe set. Two built-in environments: a double integrator and a
//! frictionless cart-pole.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("non-finite state entry at index {0}")]
    NonFiniteState(usize),
    #[error("unknown environment id `{0}`")]
    UnknownEnv(String),
}

/// Bounds and dimensions of a disturbed discrete-time system.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub state_dim: usize,
    pub input_low: Vec<f64>,
    pub input_high: Vec<f64>,
    pub dist_low: Vec<f64>,
    pub dist_high: Vec<f64>,
    pub dt: f64,
    pub state_low: Vec<f64>,
    pub state_high: Vec<f64>,
}

impl SystemSpec {
    pub fn input_dim(&self) -> usize {
        self.input_low.len()
    }

    pub fn dist_dim(&self) -> usize {
        self.dist_low.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dt <= 0.0 {
            return Err(format!("dt must be positive, got {}", self.dt));
        }
        for (lo, hi) in self.input_low.iter().zip(&self.input_high) {
            if lo >= hi {
                return Err(format!("input bounds [{lo}, {hi}] are not increasing"));
            }
        }
        for (lo, hi) in self.dist_low.iter().zip(&self.dist_high) {
            if lo >= hi {
                return Err(format!("disturbance bounds [{lo}, {hi}] are not increasing"));
            }
        }
        Ok(())
    }
}

/// A state vector. Entries must stay finite through every step.
pub type EnvState = Vec<f64>;

fn check_finite(state: &[f64]) -> Result<(), EnvError> {
    match state.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(EnvError::NonFiniteState(i)),
        None => Ok(()),
    }
}

/// Constraint function: `h(x) >= 0` exactly on the safe set.
pub type ConstraintFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// An environment bundles a spec, dynamics, constraint and reward.
#[derive(Clone)]
pub struct Env {
    pub id: String,
    pub spec: SystemSpec,
    dynamics: Arc<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    constraint: ConstraintFn,
    reward: Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>,
}

impl Env {
    pub fn step(&self, state: &[f64], u: &[f64], a: &[f64]) -> Result<EnvState, EnvError> {
        check_finite(state)?;
        Ok((self.dynamics)(state, u, a))
    }

    pub fn h(&self, state: &[f64]) -> f64 {
        (self.constraint)(state)
    }

    pub fn constraint_fn(&self) -> ConstraintFn {
        self.constraint.clone()
    }

    pub fn reward(&self, state: &[f64], u: &[f64], next_state: &[f64]) -> f64 {
        (self.reward)(state, u, next_state)
    }

    /// Look up a built-in environment by id.
    pub fn by_id(id: &str) -> Result<Env, EnvError> {
        match id {
            "double_integrator" => Ok(double_integrator()),
            "cartpole" => Ok(cartpole()),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }
}

pub const DI_DT: f64 = 0.005;
pub const DI_GOAL: f64 = 1.5;

/// x' = x + dt*v, v' = v + dt*(u + a), dt = 0.005, constraints |x|<=2, |v|<=2.
pub fn double_integrator() -> Env {
    Env {
        id: "double_integrator".to_string(),
        spec: SystemSpec {
            state_dim: 2,
            input_low: vec![-1.0],
            input_high: vec![1.0],
            dist_low: vec![-0.5],
            dist_high: vec![0.5],
            dt: DI_DT,
            state_low: vec![-2.0, -2.0],
            state_high: vec![2.0, 2.0],
        },
        dynamics: Arc::new(|s, u, a| {
            let (x, v) = (s[0], s[1]);
            vec![x + DI_DT * v, v + DI_DT * (u[0] + a[0])]
        }),
        constraint: Arc::new(|s| double_integrator_h(s)),
        reward: Arc::new(|_, u, next| -(next[0] - DI_GOAL).abs() - 0.01 * u[0] * u[0]),
    }
}

/// min{x+2, 2-x, v+2, 2-v}
pub fn double_integrator_h(state: &[f64]) -> f64 {
    let (x, v) = (state[0], state[1]);
    (x + 2.0).min(2.0 - x).min(v + 2.0).min(2.0 - v)
}

pub const CP_DT: f64 = 0.01;
pub const CP_FORCE_SCALE: f64 = 10.0;
pub const CP_CART_MASS: f64 = 1.0;
pub const CP_POLE_MASS: f64 = 0.1;
pub const CP_POLE_HALF_LEN: f64 = 0.5;
pub const CP_GRAVITY: f64 = 9.8;
pub const CP_GOAL: f64 = 1.0;

/// Angular acceleration of the frictionless cart-pole under total
/// horizontal force `force` (classic equations of motion).
fn cartpole_accels(theta: f64, omega: f64, force: f64) -> (f64, f64) {
    let total_mass = CP_CART_MASS + CP_POLE_MASS;
    let pm_len = CP_POLE_MASS * CP_POLE_HALF_LEN;
    let (sin_t, cos_t) = theta.sin_cos();
    let temp = (force + pm_len * omega * omega * sin_t) / total_mass;
    let theta_acc = (CP_GRAVITY * sin_t - cos_t * temp)
        / (CP_POLE_HALF_LEN * (4.0 / 3.0 - CP_POLE_MASS * cos_t * cos_t / total_mass));
    let x_acc = temp - pm_len * theta_acc * cos_t / total_mass;
    (x_acc, theta_acc)
}

/// Explicit Euler step of the cart-pole at dt=0.01; `u` and `a` are unit
/// force commands scaled by 10 N. State: (x, v, theta, omega).
pub fn cartpole() -> Env {
    Env {
        id: "cartpole".to_string(),
        spec: SystemSpec {
            state_dim: 4,
            input_low: vec![-1.0],
            input_high: vec![1.0],
            dist_low: vec![-0.5],
            dist_high: vec![0.5],
            dt: CP_DT,
            state_low: vec![-2.0, -2.0, -0.2, -2.0],
            state_high: vec![2.0, 2.0, 0.2, 2.0],
        },
        dynamics: Arc::new(|s, u, a| {
            let (x, v, theta, omega) = (s[0], s[1], s[2], s[3]);
            let force = CP_FORCE_SCALE * (u[0] + a[0]);
            let (x_acc, theta_acc) = cartpole_accels(theta, omega, force);
            vec![
                x + CP_DT * v,
                v + CP_DT * x_acc,
                theta + CP_DT * omega,
                omega + CP_DT * theta_acc,
            ]
        }),
        constraint: Arc::new(|s| cartpole_h(s)),
        reward: Arc::new(|_, u, next| -(next[0] - CP_GOAL).abs() - 0.01 * u[0] * u[0]),
    }
}

/// min{theta+0.2, 0.2-theta}
pub fn cartpole_h(state: &[f64]) -> f64 {
    let theta = state[2];
    (theta + 0.2).min(0.2 - theta)
}
