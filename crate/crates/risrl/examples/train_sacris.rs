//! Train the constrained soft actor-critic on the double integrator and
//! evaluate it against its own learned adversary and without disturbance.
//!
//!     cargo run --release --example train_sacris [seed]

use risrl::env::double_integrator;
use risrl::runtime::{MetricsWriter, TrainConfig};
use risrl::sacris::{evaluate, sacris_train_with, EvalProtocol};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(60_000);
    let env = double_integrator();
    let config = TrainConfig {
        seed,
        hidden: vec![32, 32],
        batch_size: 128,
        total_steps: steps,
        steps_per_epoch: 2000,
        eval_init_fraction: 0.4,
        ..TrainConfig::default()
    };

    let start = std::time::Instant::now();
    let eval_cfg = config.clone();
    let probe_env = double_integrator();
    let agent = sacris_train_with(&env, &config, false, false, &mut MetricsWriter::sink(), |step, agent| {
        if step % 10_000 == 0 {
            let mut rng = eval_cfg.rng_stream("probe-eval");
            let runs = evaluate(
                &probe_env,
                agent,
                EvalProtocol::LearnedAdversary,
                10,
                eval_cfg.eval_init_fraction,
                eval_cfg.max_episode_len,
                &mut rng,
            );
            let violating = runs.iter().filter(|m| m.violation_steps > 0).count();
            let ret = runs.iter().map(|m| m.episode_return).sum::<f64>() / runs.len() as f64;
            eprintln!(
                "step {step:>7} lambda {:>8.4} alpha {:>7.4} eval return {ret:>8.2} violating {violating}/10 ({:.0?})",
                agent.lambda,
                agent.alpha(),
                start.elapsed()
            );
        }
        false
    })
    .expect("finite training");
    println!(
        "trained {} steps in {:.1?}; lambda = {:.4}, alpha = {:.4}",
        config.total_steps,
        start.elapsed(),
        agent.lambda,
        agent.alpha()
    );

    for protocol in [EvalProtocol::LearnedAdversary, EvalProtocol::NoDisturbance] {
        let mut rng = config.rng_stream("eval");
        let episodes = evaluate(
            &env,
            &agent,
            protocol,
            config.eval_episodes,
            config.eval_init_fraction,
            config.max_episode_len,
            &mut rng,
        );
        let n = episodes.len() as f64;
        let mean_return = episodes.iter().map(|m| m.episode_return).sum::<f64>() / n;
        let violating = episodes.iter().filter(|m| m.violation_steps > 0).count();
        println!(
            "{:<18} mean return {:+.3}, violating episodes {}/{}",
            protocol.as_str(),
            mean_return,
            violating,
            episodes.len()
        );
    }
}
