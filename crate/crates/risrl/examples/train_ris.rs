//! Train the robust-invariant-set actor-critic on the double integrator and
//! compare its learned set against the tabular solver's.
//!
//!     cargo run --release --example train_ris [seed]

use risrl::env::double_integrator;
use risrl::grid::{GridSolver, StateGrid};
use risrl::ris::ris_train_with;
use risrl::runtime::{MetricsWriter, TrainConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let env = double_integrator();
    let config = TrainConfig {
        seed,
        hidden: vec![32, 32],
        batch_size: 128,
        total_steps: 200_000,
        steps_per_epoch: 2000,
        init_state_fraction: 1.0,
        ..TrainConfig::default()
    };

    let grid = StateGrid::for_env(&env, &[101, 101], 11, 11);
    let solver = GridSolver::for_env(&env, grid.clone(), config.gamma_h);
    let oracle = solver
        .policy_iteration(config.tol)
        .expect("tabular policy iteration converges");
    let oracle_mask = solver.extract_set(&oracle.value);
    eprintln!(
        "oracle: {} of {} nodes inside after {} improvement rounds",
        oracle_mask.count(),
        grid.node_count(),
        oracle.log.len()
    );

    let mut metrics = MetricsWriter::sink();
    let start = std::time::Instant::now();
    let agent = ris_train_with(&env, &config, &mut metrics, |step, agent| {
        let iou = agent.learned_mask(&grid).iou(&oracle_mask);
        eprintln!("step {step:>7}  IoU {iou:.4}  ({:.1?})", start.elapsed());
        iou >= 0.9
    })
    .expect("training stays finite");

    let final_iou = agent.learned_mask(&grid).iou(&oracle_mask);
    println!("final IoU against tabular solution: {final_iou:.4}");
}
