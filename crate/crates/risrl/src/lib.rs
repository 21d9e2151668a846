//! Robust invariant set synthesis and safe reinforcement learning under
//! worst-case disturbances.
//!
//! The library has three layers:
//!
//! * [`grid`] — exact tabular dynamic programming for the safety value
//!   function of a two-player zero-sum safety game: self-consistency
//!   operators, policy iteration, value iteration, and extraction of
//!   robust invariant sets as zero-superlevel sets.
//! * [`ris`] — an actor-critic counterpart that learns the same safety
//!   value with neural function approximation (safety critic, protagonist
//!   policy, adversary policy).
//! * [`sacris`] — soft actor-critic constrained to stay inside the learned
//!   robust invariant set via a Lagrange multiplier on the safety critic.
//!
//! Supporting modules: [`env`] (disturbed discrete-time systems), [`net`]
//! (MLPs, reverse-mode gradients, Adam, target blending) and [`runtime`]
//! (replay, rollouts, metrics, config).
//!
//! See the `examples/` directory for runnable entry points per capability,
//! and the `risrl` binary for the config-driven command line.

pub mod cli;
pub mod env;
pub mod grid;
pub mod net;
pub mod ris;
pub mod runtime;
pub mod sacris;
