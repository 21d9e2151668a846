//! Solve the tabular safety game for the double integrator and compare the
//! robust invariant set (worst-case disturbance) with the standard one
//! (no disturbance).
//!
//!     cargo run --release --example solve_double_integrator

use risrl::env::double_integrator;
use risrl::grid::{write_mask_csv, GridSolver, StateGrid};

fn main() {
    let env = double_integrator();
    let gamma_h = 0.99;
    let tol = 1e-6;

    let grid = StateGrid::for_env(&env, &[101, 101], 11, 11);
    let robust_solver = GridSolver::for_env(&env, grid.clone(), gamma_h);
    let robust = robust_solver.policy_iteration(tol).expect("convergence");
    let robust_mask = robust_solver.extract_set(&robust.value);

    let no_disturb = grid.clone().with_disturb_actions(vec![vec![0.0]]);
    let standard_solver = GridSolver::for_env(&env, no_disturb, gamma_h);
    let standard = standard_solver.policy_iteration(tol).expect("convergence");
    let standard_mask = standard_solver.extract_set(&standard.value);

    println!("nodes inside safe box:     {}", grid.node_count());
    println!("standard invariant set:    {} nodes", standard_mask.count());
    println!("robust invariant set:      {} nodes", robust_mask.count());
    println!("robust subset of standard: {}", robust_mask.is_subset_of(&standard_mask));
    println!(
        "policy iteration rounds:   {} (residual {:.2e})",
        robust.log.len(),
        robust.log.last().map(|e| e.residual).unwrap_or(0.0)
    );

    write_mask_csv(&grid, &robust_mask, std::fs::File::create("robust_mask.csv").unwrap())
        .unwrap();
    println!("robust set written to robust_mask.csv");
}
