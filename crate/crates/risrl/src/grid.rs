//! Tabular dynamic programming for the zero-sum safety game.
//!
//! A [`GridSolver`] discretizes the state box into a uniform grid and both
//! action spaces into finite lists, then applies the discounted safety
//! self-consistency operators
//!
//! ```text
//! T(V)(x) = (1 - gamma_h) h(x) + gamma_h min{ h(x), <successor value> }
//! ```
//!
//! where the successor value is V(f(x,u,a)) for fixed policies, the
//! adversary minimum for a fixed protagonist, or the max-min over both
//! action lists for the optimal operator. All three are monotone
//! gamma_h-contractions, so policy evaluation, policy iteration and value
//! iteration all converge to unique fixed points; the zero-superlevel set
//! of the optimal fixed point is the (discretized) maximal robust
//! invariant set.
//!
//! Off-grid successors are valued by clamping to the box and subtracting
//! the Euclidean distance to it, so leaving the region of interest reads
//! as unsafe.

use rayon::prelude::*;
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

use crate::env::Env;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("iteration cap {cap} exceeded, residual {residual:e}")]
    IterationCap { cap: usize, residual: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One uniformly spaced grid axis.
#[derive(Debug, Clone)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }
}

/// Uniform state grid plus discretized control and disturbance action lists.
#[derive(Debug, Clone)]
pub struct StateGrid {
    pub axes: Vec<GridAxis>,
    pub control_actions: Vec<Vec<f64>>,
    pub disturb_actions: Vec<Vec<f64>>,
}

/// `n` points spanning `[lo, hi]` including both endpoints; the interval
/// midpoint when `n == 1`.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Cross product of per-dimension linspaces.
fn action_grid(low: &[f64], high: &[f64], n_per_dim: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = low
        .iter()
        .zip(high)
        .map(|(&lo, &hi)| linspace(lo, hi, n_per_dim))
        .collect();
    let mut out = vec![vec![]];
    for axis in &axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &v in axis {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

impl StateGrid {
    /// Uniform grid over the spec's state box with `nodes_per_dim` nodes on
    /// each axis and uniformly spaced actions including interval endpoints.
    pub fn uniform(
        state_low: &[f64],
        state_high: &[f64],
        nodes_per_dim: &[usize],
        input_low: &[f64],
        input_high: &[f64],
        n_control: usize,
        dist_low: &[f64],
        dist_high: &[f64],
        n_disturb: usize,
    ) -> Self {
        assert!(nodes_per_dim.iter().all(|&n| n >= 2), "need >= 2 nodes per dimension");
        let axes = state_low
            .iter()
            .zip(state_high)
            .zip(nodes_per_dim)
            .map(|((&lo, &hi), &n)| GridAxis { lo, hi, n })
            .collect();
        StateGrid {
            axes,
            control_actions: action_grid(input_low, input_high, n_control),
            disturb_actions: action_grid(dist_low, dist_high, n_disturb),
        }
    }

    pub fn for_env(env: &Env, nodes_per_dim: &[usize], n_control: usize, n_disturb: usize) -> Self {
        let s = &env.spec;
        Self::uniform(
            &s.state_low,
            &s.state_high,
            nodes_per_dim,
            &s.input_low,
            &s.input_high,
            n_control,
            &s.dist_low,
            &s.dist_high,
            n_disturb,
        )
    }

    /// Replace the disturbance list, e.g. with the singleton `{0}` to
    /// compute the standard (disturbance-free) invariant set.
    pub fn with_disturb_actions(mut self, actions: Vec<Vec<f64>>) -> Self {
        assert!(!actions.is_empty());
        self.disturb_actions = actions;
        self
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    /// Row-major strides (last axis contiguous).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.axes.len()];
        for i in (0..self.axes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.axes[i + 1].n;
        }
        strides
    }

    pub fn node_state(&self, index: usize) -> Vec<f64> {
        let strides = self.strides();
        self.axes
            .iter()
            .zip(&strides)
            .map(|(axis, &s)| axis.lo + axis.step() * ((index / s) % axis.n) as f64)
            .collect()
    }

    /// Flat index of the node at the given per-axis indices.
    pub fn flat_index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(self.strides())
            .map(|(&c, s)| c * s)
            .sum()
    }
}

/// Discretized safety value function: one value per grid node.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub values: Vec<f64>,
    pub gamma_h: f64,
}

impl ValueTable {
    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Which player a tabular policy controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Protagonist,
    Adversary,
}

/// One action index per grid node.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub action_indices: Vec<u32>,
    pub role: Role,
}

impl TabularPolicy {
    pub fn zeros(node_count: usize, role: Role) -> Self {
        TabularPolicy { action_indices: vec![0; node_count], role }
    }
}

/// Boolean membership mask: `true` exactly where `V >= 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetMask {
    pub inside: Vec<bool>,
}

impl SetMask {
    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &SetMask) -> bool {
        self.inside.iter().zip(&other.inside).all(|(&a, &b)| !a || b)
    }

    /// Intersection-over-union against another mask on the same grid.
    pub fn iou(&self, other: &SetMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.inside.iter().zip(&other.inside) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 { 1.0 } else { inter as f64 / union as f64 }
    }
}

/// Multilinear interpolation of node values at `state`, with out-of-box
/// states clamped to the box and penalized by the Euclidean distance to it.
pub fn interpolate(grid: &StateGrid, values: &[f64], state: &[f64]) -> f64 {
    let dim = grid.dim();
    let strides = grid.strides();
    let mut base = 0usize;
    let mut fracs = [0.0f64; 8];
    let mut active = [false; 8];
    let mut penalty_sq = 0.0;
    assert!(dim <= 8, "grids beyond 8 dimensions are not supported");
    for (d, axis) in grid.axes.iter().enumerate() {
        let x = state[d];
        let clamped = x.clamp(axis.lo, axis.hi);
        let out = x - clamped;
        penalty_sq += out * out;
        let step = axis.step();
        let pos = (clamped - axis.lo) / step;
        let mut cell = pos.floor() as usize;
        if cell >= axis.n - 1 {
            cell = axis.n - 2;
        }
        let frac = pos - cell as f64;
        base += cell * strides[d];
        fracs[d] = frac;
        active[d] = frac > 0.0;
    }
    let mut acc = 0.0;
    // Corners of the enclosing cell; dimensions with frac == 0 contribute
    // a single corner.
    let corners = 1usize << dim;
    for mask in 0..corners {
        let mut w = 1.0;
        let mut idx = base;
        for d in 0..dim {
            if mask & (1 << d) != 0 {
                if !active[d] {
                    w = 0.0;
                    break;
                }
                w *= fracs[d];
                idx += strides[d];
            } else {
                w *= 1.0 - fracs[d];
            }
        }
        if w != 0.0 {
            acc += w * values[idx];
        }
    }
    acc - penalty_sq.sqrt()
}

/// Interpolation stencil for one precomputed successor state.
#[derive(Debug, Clone)]
struct Stencil {
    corners: Vec<(u32, f64)>,
    penalty: f64,
}

fn build_stencil(grid: &StateGrid, strides: &[usize], state: &[f64]) -> Stencil {
    let dim = grid.dim();
    let mut base = 0usize;
    let mut fracs = vec![0.0f64; dim];
    let mut penalty_sq = 0.0;
    for (d, axis) in grid.axes.iter().enumerate() {
        let x = state[d];
        let clamped = x.clamp(axis.lo, axis.hi);
        let out = x - clamped;
        penalty_sq += out * out;
        let step = axis.step();
        let pos = (clamped - axis.lo) / step;
        let mut cell = pos.floor() as usize;
        if cell >= axis.n - 1 {
            cell = axis.n - 2;
        }
        base += cell * strides[d];
        fracs[d] = pos - cell as f64;
    }
    let mut corners = Vec::with_capacity(1 << dim);
    for mask in 0..(1usize << dim) {
        let mut w = 1.0;
        let mut idx = base;
        for d in 0..dim {
            if mask & (1 << d) != 0 {
                w *= fracs[d];
                idx += strides[d];
            } else {
                w *= 1.0 - fracs[d];
            }
        }
        if w != 0.0 {
            corners.push((idx as u32, w));
        }
    }
    Stencil { corners, penalty: penalty_sq.sqrt() }
}

/// Per-iteration record of a fixed-point solve.
#[derive(Debug, Clone)]
pub struct IterationLog {
    pub iteration: usize,
    pub residual: f64,
    pub monotone: bool,
}

/// Result of policy iteration: fixed point, greedy policy, recorded value
/// iterates and per-iteration log.
pub struct PolicyIterationResult {
    pub value: ValueTable,
    pub policy: TabularPolicy,
    pub iterates: Vec<ValueTable>,
    pub log: Vec<IterationLog>,
}

pub type DynamicsFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type HFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Grid, constraint values and precomputed successor stencils for every
/// (node, control, disturbance) triple.
pub struct GridSolver {
    pub grid: StateGrid,
    pub gamma_h: f64,
    pub iteration_cap: usize,
    h: Vec<f64>,
    stencils: Vec<Stencil>,
    n_u: usize,
    n_a: usize,
}

impl GridSolver {
    pub fn new(grid: StateGrid, dynamics: DynamicsFn, constraint: HFn, gamma_h: f64) -> Self {
        assert!(gamma_h > 0.0 && gamma_h < 1.0, "gamma_h must lie in (0,1)");
        let strides = grid.strides();
        let nodes = grid.node_count();
        let n_u = grid.control_actions.len();
        let n_a = grid.disturb_actions.len();
        let h: Vec<f64> = (0..nodes).map(|i| constraint(&grid.node_state(i))).collect();
        let stencils: Vec<Stencil> = (0..nodes)
            .into_par_iter()
            .flat_map_iter(|node| {
                let state = grid.node_state(node);
                let mut out = Vec::with_capacity(n_u * n_a);
                for u in &grid.control_actions {
                    for a in &grid.disturb_actions {
                        let next = dynamics(&state, u, a);
                        out.push(build_stencil(&grid, &strides, &next));
                    }
                }
                out
            })
            .collect();
        GridSolver { grid, gamma_h, iteration_cap: 1_000_000, h, stencils, n_u, n_a }
    }

    pub fn for_env(env: &Env, grid: StateGrid, gamma_h: f64) -> Self {
        let e = env.clone();
        let dynamics: DynamicsFn = Arc::new(move |s, u, a| e.step(s, u, a).expect("finite state"));
        let e2 = env.clone();
        let constraint: HFn = Arc::new(move |s| e2.h(s));
        Self::new(grid, dynamics, constraint, gamma_h)
    }

    pub fn h_values(&self) -> &[f64] {
        &self.h
    }

    /// Value table initialized to `h`, the starting point of every
    /// fixed-point solve here.
    pub fn h_table(&self) -> ValueTable {
        ValueTable { values: self.h.clone(), gamma_h: self.gamma_h }
    }

    #[inline]
    fn successor_value(&self, values: &[f64], node: usize, iu: usize, ia: usize) -> f64 {
        let s = &self.stencils[(node * self.n_u + iu) * self.n_a + ia];
        let mut acc = 0.0;
        for &(idx, w) in &s.corners {
            acc += w * values[idx as usize];
        }
        acc - s.penalty
    }

    #[inline]
    fn backup(&self, h: f64, succ: f64) -> f64 {
        (1.0 - self.gamma_h) * h + self.gamma_h * h.min(succ)
    }

    fn apply_per_node<F>(&self, f: F) -> ValueTable
    where
        F: Fn(usize) -> f64 + Sync,
    {
        let values: Vec<f64> = (0..self.grid.node_count())
            .into_par_iter()
            .map(|node| self.backup(self.h[node], f(node)))
            .collect();
        ValueTable { values, gamma_h: self.gamma_h }
    }

    /// T^{pi,mu}: both players follow fixed tabular policies.
    pub fn apply_t_pi_mu(&self, v: &ValueTable, pi: &TabularPolicy, mu: &TabularPolicy) -> ValueTable {
        self.apply_per_node(|node| {
            self.successor_value(
                &v.values,
                node,
                pi.action_indices[node] as usize,
                mu.action_indices[node] as usize,
            )
        })
    }

    /// T^{pi}: adversary minimizes the successor value.
    pub fn apply_t_pi(&self, v: &ValueTable, pi: &TabularPolicy) -> ValueTable {
        self.apply_per_node(|node| self.min_over_adversary(&v.values, node, pi.action_indices[node] as usize))
    }

    /// T: protagonist maximizes the adversary's minimum.
    pub fn apply_t_opt(&self, v: &ValueTable) -> ValueTable {
        self.apply_per_node(|node| {
            (0..self.n_u)
                .map(|iu| self.min_over_adversary(&v.values, node, iu))
                .fold(f64::NEG_INFINITY, f64::max)
        })
    }

    #[inline]
    fn min_over_adversary(&self, values: &[f64], node: usize, iu: usize) -> f64 {
        (0..self.n_a)
            .map(|ia| self.successor_value(values, node, iu, ia))
            .fold(f64::INFINITY, f64::min)
    }

    fn fixed_point<F>(&self, tol: f64, apply: F) -> Result<(ValueTable, usize), GridError>
    where
        F: Fn(&ValueTable) -> ValueTable,
    {
        assert!(tol > 0.0);
        let mut v = self.h_table();
        for iter in 0..self.iteration_cap {
            let next = apply(&v);
            let residual = next.sup_distance(&v);
            v = next;
            if residual < tol {
                return Ok((v, iter + 1));
            }
        }
        let next = apply(&v);
        Err(GridError::IterationCap { cap: self.iteration_cap, residual: next.sup_distance(&v) })
    }

    /// Iterate T^{pi} from V0 = h until the sup-norm change drops below
    /// `tol`; the result is within `tol / (1 - gamma_h)` of the true fixed
    /// point.
    pub fn policy_evaluation(&self, pi: &TabularPolicy, tol: f64) -> Result<ValueTable, GridError> {
        Ok(self.fixed_point(tol, |v| self.apply_t_pi(v, pi))?.0)
    }

    /// Greedy protagonist: at each node the control maximizing the
    /// adversary's minimum successor value, ties broken by lowest index.
    pub fn policy_improvement(&self, v: &ValueTable) -> TabularPolicy {
        let action_indices: Vec<u32> = (0..self.grid.node_count())
            .into_par_iter()
            .map(|node| {
                let mut best = 0u32;
                let mut best_val = f64::NEG_INFINITY;
                for iu in 0..self.n_u {
                    let val = self.min_over_adversary(&v.values, node, iu);
                    if val > best_val {
                        best_val = val;
                        best = iu as u32;
                    }
                }
                best
            })
            .collect();
        TabularPolicy { action_indices, role: Role::Protagonist }
    }

    /// Alternate policy evaluation and greedy improvement until the policy
    /// is stable and the value change is below `tol`. Evaluations are
    /// solved to a tolerance tightened by (1 - gamma_h) so the recorded
    /// iterates preserve the exact scheme's pointwise monotonicity to well
    /// below 1e-9.
    pub fn policy_iteration(&self, tol: f64) -> Result<PolicyIterationResult, GridError> {
        self.policy_iteration_from(TabularPolicy::zeros(self.grid.node_count(), Role::Protagonist), tol)
    }

    pub fn policy_iteration_from(
        &self,
        initial: TabularPolicy,
        tol: f64,
    ) -> Result<PolicyIterationResult, GridError> {
        assert!(tol > 0.0);
        let eval_tol = tol * (1.0 - self.gamma_h) * 1e-3;
        let mut pi = initial;
        let mut iterates: Vec<ValueTable> = Vec::new();
        let mut log = Vec::new();
        for iter in 0..self.iteration_cap {
            let v = self.policy_evaluation(&pi, eval_tol)?;
            let monotone = iterates
                .last()
                .map(|prev| {
                    v.values
                        .iter()
                        .zip(&prev.values)
                        .all(|(new, old)| *new >= old - 1e-9)
                })
                .unwrap_or(true);
            let next_pi = self.policy_improvement(&v);
            let value_change = iterates.last().map(|prev| v.sup_distance(prev)).unwrap_or(f64::INFINITY);
            let residual = self.apply_t_opt(&v).sup_distance(&v);
            log.push(IterationLog { iteration: iter, residual, monotone });
            let stable = next_pi.action_indices == pi.action_indices;
            iterates.push(v);
            if stable && value_change < tol {
                let value = iterates.last().unwrap().clone();
                return Ok(PolicyIterationResult { value, policy: pi, iterates, log });
            }
            pi = next_pi;
        }
        Err(GridError::IterationCap { cap: self.iteration_cap, residual: f64::NAN })
    }

    /// Independent oracle: iterate the optimal operator T from V0 = h.
    /// The stopping rule bounds the true fixed-point error by `tol`.
    pub fn value_iteration(&self, tol: f64) -> Result<ValueTable, GridError> {
        let stop = tol * (1.0 - self.gamma_h);
        Ok(self.fixed_point(stop, |v| self.apply_t_opt(v))?.0)
    }

    /// Zero-superlevel set of a value table.
    pub fn extract_set(&self, v: &ValueTable) -> SetMask {
        SetMask { inside: v.values.iter().map(|&x| x >= 0.0).collect() }
    }
}

/// Write a value table as CSV: header `dim0,...,value`, one node per line
/// in row-major node order.
pub fn write_value_csv<W: Write>(grid: &StateGrid, values: &[f64], mut w: W) -> std::io::Result<()> {
    let header: Vec<String> = (0..grid.dim()).map(|d| format!("dim{d}")).collect();
    writeln!(w, "{},value", header.join(","))?;
    for (i, v) in values.iter().enumerate() {
        let state = grid.node_state(i);
        let coords: Vec<String> = state.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{},{}", coords.join(","), v)?;
    }
    Ok(())
}

/// Same layout as [`write_value_csv`] with 0/1 membership values.
pub fn write_mask_csv<W: Write>(grid: &StateGrid, mask: &SetMask, mut w: W) -> std::io::Result<()> {
    let header: Vec<String> = (0..grid.dim()).map(|d| format!("dim{d}")).collect();
    writeln!(w, "{},value", header.join(","))?;
    for (i, &inside) in mask.inside.iter().enumerate() {
        let state = grid.node_state(i);
        let coords: Vec<String> = state.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{},{}", coords.join(","), inside as u8)?;
    }
    Ok(())
}

/// Two-node chain used across tests and the toy example: node 0 maps to
/// node 1, node 1 is absorbing, h(0) = 2, h(1) = -1.
pub fn two_state_chain(gamma_h: f64) -> GridSolver {
    let grid = StateGrid::uniform(
        &[0.0],
        &[1.0],
        &[2],
        &[0.0],
        &[1.0],
        1,
        &[0.0],
        &[1.0],
        1,
    );
    let dynamics: DynamicsFn = Arc::new(|_s, _u, _a| vec![1.0]);
    let constraint: HFn = Arc::new(|s| 2.0 - 3.0 * s[0]);
    GridSolver::new(grid, dynamics, constraint, gamma_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::double_integrator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Single absorbing node with constraint value `h`.
    fn absorbing(h: f64, gamma_h: f64) -> GridSolver {
        let grid = StateGrid::uniform(&[0.0], &[1.0], &[2], &[0.0], &[1.0], 1, &[0.0], &[1.0], 1);
        let dynamics: DynamicsFn = Arc::new(|s, _u, _a| s.to_vec());
        let constraint: HFn = Arc::new(move |_| h);
        GridSolver::new(grid, dynamics, constraint, gamma_h)
    }

    /// Random 1-D system: `nodes` nodes on [0,1], successor positions drawn
    /// uniformly per (node, u, a). Successors hit off-node positions so the
    /// interpolation path is exercised.
    fn random_system(nodes: usize, n_u: usize, n_a: usize, rng: &mut ChaCha8Rng) -> GridSolver {
        let grid = StateGrid::uniform(&[0.0], &[1.0], &[nodes], &[0.0], &[1.0], n_u, &[0.0], &[1.0], n_a);
        let mut table = vec![0.0; nodes * n_u * n_a];
        for v in table.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let step = 1.0 / (nodes - 1) as f64;
        let action_index = |x: f64, n: usize| {
            if n == 1 { 0 } else { (x * (n - 1) as f64).round() as usize }
        };
        let dynamics: DynamicsFn = Arc::new(move |s, u, a| {
            let node = (s[0] / step).round() as usize;
            let iu = action_index(u[0], n_u);
            let ia = action_index(a[0], n_a);
            vec![table[(node * n_u + iu) * n_a + ia]]
        });
        let constraint: HFn = Arc::new(|s| 1.0 - 2.0 * s[0] + (7.0 * s[0]).sin());
        GridSolver::new(grid, dynamics, constraint, 0.9)
    }

    fn rand_table(solver: &GridSolver, rng: &mut ChaCha8Rng) -> ValueTable {
        ValueTable {
            values: (0..solver.grid.node_count()).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            gamma_h: solver.gamma_h,
        }
    }

    #[test]
    fn interpolate_identity_on_nodes() {
        let grid = StateGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], &[3, 3], &[0.0], &[1.0], 2, &[0.0], &[1.0], 2);
        let values: Vec<f64> = (0..9).map(|i| i as f64).collect();
        for i in 0..9 {
            let s = grid.node_state(i);
            assert!((interpolate(&grid, &values, &s) - values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolate_midpoint_linearity() {
        let grid = StateGrid::uniform(&[0.0], &[1.0], &[2], &[0.0], &[1.0], 2, &[0.0], &[1.0], 2);
        let values = vec![0.0, 2.0];
        assert!((interpolate(&grid, &values, &[0.5]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolate_clamp_penalty() {
        let grid = StateGrid::uniform(&[0.0], &[1.0], &[2], &[0.0], &[1.0], 2, &[0.0], &[1.0], 2);
        let values = vec![0.7, 0.3];
        // 0.5 outside the box, clamped boundary value 0.3
        assert!((interpolate(&grid, &values, &[1.5]) - (0.3 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn t_pi_mu_absorbing_examples() {
        let solver = absorbing(1.0, 0.5);
        let pi = TabularPolicy::zeros(2, Role::Protagonist);
        let mu = TabularPolicy::zeros(2, Role::Adversary);
        let v0 = ValueTable { values: vec![0.0, 0.0], gamma_h: 0.5 };
        let t = solver.apply_t_pi_mu(&v0, &pi, &mu);
        assert!((t.values[0] - 0.5).abs() < 1e-12);
        let v1 = ValueTable { values: vec![1.0, 1.0], gamma_h: 0.5 };
        let t = solver.apply_t_pi_mu(&v1, &pi, &mu);
        assert!((t.values[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_fixed_point_hand_solved() {
        let solver = two_state_chain(0.9);
        let pi = TabularPolicy::zeros(2, Role::Protagonist);
        let v = solver.policy_evaluation(&pi, 1e-10).unwrap();
        assert!((v.values[0] + 0.7).abs() < 1e-6);
        assert!((v.values[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn t_pi_singleton_adversary_equals_t_pi_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let solver = random_system(20, 3, 1, &mut rng);
        let pi = TabularPolicy::zeros(20, Role::Protagonist);
        let mu = TabularPolicy::zeros(20, Role::Adversary);
        let v = rand_table(&solver, &mut rng);
        let a = solver.apply_t_pi(&v, &pi);
        let b = solver.apply_t_pi_mu(&v, &pi, &mu);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn t_opt_singleton_actions_equals_t_pi_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let solver = random_system(20, 1, 1, &mut rng);
        let pi = TabularPolicy::zeros(20, Role::Protagonist);
        let mu = TabularPolicy::zeros(20, Role::Adversary);
        let v = rand_table(&solver, &mut rng);
        let a = solver.apply_t_opt(&v);
        let b = solver.apply_t_pi_mu(&v, &pi, &mu);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn operators_are_contractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let solver = random_system(50, 3, 3, &mut rng);
        let pi = TabularPolicy::zeros(50, Role::Protagonist);
        let mu = TabularPolicy::zeros(50, Role::Adversary);
        for _ in 0..100 {
            let v = rand_table(&solver, &mut rng);
            let w = rand_table(&solver, &mut rng);
            let d = v.sup_distance(&w);
            let bound = solver.gamma_h * d + 1e-12;
            assert!(solver.apply_t_pi_mu(&v, &pi, &mu).sup_distance(&solver.apply_t_pi_mu(&w, &pi, &mu)) <= bound);
            assert!(solver.apply_t_pi(&v, &pi).sup_distance(&solver.apply_t_pi(&w, &pi)) <= bound);
            assert!(solver.apply_t_opt(&v).sup_distance(&solver.apply_t_opt(&w)) <= bound);
        }
    }

    #[test]
    fn operators_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let solver = random_system(50, 3, 3, &mut rng);
        let pi = TabularPolicy::zeros(50, Role::Protagonist);
        let mu = TabularPolicy::zeros(50, Role::Adversary);
        let dominates = |a: &ValueTable, b: &ValueTable| {
            a.values.iter().zip(&b.values).all(|(x, y)| x >= y)
        };
        for _ in 0..100 {
            let lo = rand_table(&solver, &mut rng);
            let hi = ValueTable {
                values: lo.values.iter().map(|v| v + rng.gen_range(0.0..2.0)).collect(),
                gamma_h: lo.gamma_h,
            };
            assert!(dominates(&solver.apply_t_pi_mu(&hi, &pi, &mu), &solver.apply_t_pi_mu(&lo, &pi, &mu)));
            assert!(dominates(&solver.apply_t_pi(&hi, &pi), &solver.apply_t_pi(&lo, &pi)));
            assert!(dominates(&solver.apply_t_opt(&hi), &solver.apply_t_opt(&lo)));
        }
    }

    #[test]
    fn policy_evaluation_tolerance_consistency() {
        let solver = two_state_chain(0.9);
        let pi = TabularPolicy::zeros(2, Role::Protagonist);
        let a = solver.policy_evaluation(&pi, 1e-9).unwrap();
        let b = solver.policy_evaluation(&pi, 1e-6).unwrap();
        assert!(a.sup_distance(&b) < 1e-5);
    }

    #[test]
    fn policy_evaluation_iteration_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut solver = random_system(30, 2, 2, &mut rng);
        solver.iteration_cap = 3;
        let pi = TabularPolicy::zeros(30, Role::Protagonist);
        match solver.policy_evaluation(&pi, 1e-12) {
            Err(GridError::IterationCap { cap: 3, residual }) => assert!(residual > 0.0),
            other => panic!("expected iteration cap error, got {:?}", other.map(|v| v.values)),
        }
    }

    #[test]
    fn policy_improvement_argmax_and_ties() {
        // Two controls steering to node values {0.1, 0.3}: pick index 1.
        let grid = StateGrid::uniform(&[0.0], &[1.0], &[2], &[0.0], &[1.0], 2, &[0.0], &[1.0], 1);
        let dynamics: DynamicsFn = Arc::new(|_s, u, _a| vec![u[0]]);
        let constraint: HFn = Arc::new(|_| 1.0);
        let solver = GridSolver::new(grid, dynamics, constraint, 0.9);
        let v = ValueTable { values: vec![0.1, 0.3], gamma_h: 0.9 };
        let pi = solver.policy_improvement(&v);
        assert_eq!(pi.action_indices, vec![1, 1]);

        // All actions tie: pick index 0.
        let grid = StateGrid::uniform(&[0.0], &[1.0], &[2], &[0.0], &[1.0], 3, &[0.0], &[1.0], 1);
        let dynamics: DynamicsFn = Arc::new(|s, _u, _a| s.to_vec());
        let constraint: HFn = Arc::new(|_| 1.0);
        let solver = GridSolver::new(grid, dynamics, constraint, 0.9);
        let v = ValueTable { values: vec![0.5, 0.5], gamma_h: 0.9 };
        let pi = solver.policy_improvement(&v);
        assert_eq!(pi.action_indices, vec![0, 0]);
    }

    #[test]
    fn chain_policy_iteration_and_value_iteration_agree() {
        let solver = two_state_chain(0.9);
        let pi_result = solver.policy_iteration(1e-8).unwrap();
        assert!(pi_result.iterates.len() <= 2);
        assert!((pi_result.value.values[0] + 0.7).abs() < 1e-6);
        assert!((pi_result.value.values[1] + 1.0).abs() < 1e-6);
        let vi = solver.value_iteration(1e-8).unwrap();
        assert!(vi.sup_distance(&pi_result.value) < 1e-6);
    }

    #[test]
    fn chain_discount_sensitivity() {
        for (gamma, expected) in [(0.9, -0.7), (0.99, -0.97)] {
            let solver = two_state_chain(gamma);
            let vi = solver.value_iteration(1e-9).unwrap();
            assert!((vi.values[0] - expected).abs() < 1e-6, "gamma={gamma}");
        }
    }

    #[test]
    fn extract_set_examples() {
        let env = double_integrator();
        let grid = StateGrid::for_env(&env, &[21, 21], 3, 3);
        let solver = GridSolver::for_env(&env, grid, 0.99);
        // V = h: mask equals the safe box (the whole grid here).
        let mask = solver.extract_set(&solver.h_table());
        assert_eq!(mask.count(), 21 * 21);

        let chain = two_state_chain(0.9);
        let v = chain.value_iteration(1e-8).unwrap();
        let mask = chain.extract_set(&v);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn robust_mask_subset_of_standard_mask() {
        let env = double_integrator();
        let grid = StateGrid::for_env(&env, &[41, 41], 5, 5);
        let robust = GridSolver::for_env(&env, grid.clone(), 0.99);
        let standard = GridSolver::for_env(
            &env,
            grid.with_disturb_actions(vec![vec![0.0]]),
            0.99,
        );
        let vr = robust.value_iteration(1e-6).unwrap();
        let vs = standard.value_iteration(1e-6).unwrap();
        let mr = robust.extract_set(&vr);
        let ms = standard.extract_set(&vs);
        assert!(mr.is_subset_of(&ms));
        assert!(mr.count() < ms.count());
    }

    #[test]
    fn braking_is_greedy_at_top_edge() {
        let env = double_integrator();
        let grid = StateGrid::for_env(&env, &[41, 41], 5, 5);
        let solver = GridSolver::for_env(&env, grid, 0.99);
        let v = solver.value_iteration(1e-6).unwrap();
        let pi = solver.policy_improvement(&v);
        // Node (x=0, v=2): moving up at the top edge, maximal braking u=-1.
        let node = solver.grid.flat_index(&[20, 40]);
        assert_eq!(pi.action_indices[node], 0);
        assert_eq!(solver.grid.control_actions[0], vec![-1.0]);
    }

    #[test]
    fn set_nesting_for_evaluated_policies() {
        let env = double_integrator();
        let grid = StateGrid::for_env(&env, &[41, 41], 5, 5);
        let solver = GridSolver::for_env(&env, grid, 0.99);
        let opt = solver.value_iteration(1e-8).unwrap();
        let opt_mask = solver.extract_set(&opt);
        let safe_mask = solver.extract_set(&solver.h_table());
        assert!(opt_mask.is_subset_of(&safe_mask));
        let pi = TabularPolicy::zeros(solver.grid.node_count(), Role::Protagonist);
        let v_pi = solver.policy_evaluation(&pi, 1e-8).unwrap();
        // Allow disagreement only near the zero contour.
        let tol = 1e-6;
        for ((vp, vo), node) in v_pi.values.iter().zip(&opt.values).zip(0..) {
            if *vp >= 0.0 && *vo < 0.0 {
                assert!(vp.abs() < tol || vo.abs() < tol, "nesting violated at node {node}");
            }
        }
    }

    #[test]
    fn csv_export_layout() {
        let grid = StateGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], &[2, 2], &[0.0], &[1.0], 2, &[0.0], &[1.0], 2);
        let values = vec![0.0, 1.0, 2.0, 3.0];
        let mut buf = Vec::new();
        write_value_csv(&grid, &values, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dim0,dim1,value");
        assert_eq!(lines[1], "0,0,0");
        assert_eq!(lines[2], "0,1,1");
        assert_eq!(lines[3], "1,0,2");
        assert_eq!(lines[4], "1,1,3");
    }
}
