//! Evaluate a saved checkpoint under each disturbance protocol.
//!
//!     cargo run --release --example evaluate_checkpoint <checkpoint.json> [episodes]

use risrl::net::Checkpoint;
use risrl::runtime::TrainConfig;
use risrl::sacris::{evaluate, EvalProtocol, SacRisAgent};

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| {
        eprintln!("usage: evaluate_checkpoint <checkpoint.json> [episodes]");
        std::process::exit(1);
    });
    let episodes: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);

    let ckpt = Checkpoint::load(std::path::Path::new(&path)).expect("readable checkpoint");
    let env = risrl::env::Env::by_id(&ckpt.env_id).expect("known environment");
    let config = TrainConfig { env: ckpt.env_id.clone(), ..TrainConfig::default() };
    let mut rng = config.rng_stream("eval-init");
    let mut agent = SacRisAgent::new(&env, &config, &mut rng);
    agent.load_checkpoint(&ckpt).expect("complete checkpoint");

    for protocol in
        [EvalProtocol::LearnedAdversary, EvalProtocol::NoDisturbance, EvalProtocol::UniformRandom]
    {
        let mut rng = config.rng_stream("eval");
        let runs = evaluate(
            &env,
            &agent,
            protocol,
            episodes,
            config.eval_init_fraction,
            config.max_episode_len,
            &mut rng,
        );
        let n = runs.len() as f64;
        let mean_return = runs.iter().map(|m| m.episode_return).sum::<f64>() / n;
        let violating = runs.iter().filter(|m| m.violation_steps > 0).count();
        println!(
            "{:<18} mean return {:+.3}, violating episodes {}/{}",
            protocol.as_str(),
            mean_return,
            violating,
            runs.len()
        );
    }
}
