//! Rolls both environments with random actions and shows what each agent
//! sees, including the shared-feature slice used by the consistency metric.

use gawm::env::make_env;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for name in ["coop_capture", "switch_corridor"] {
        let mut env = make_env(name, 7)?;
        let spec = env.spec().clone();
        println!(
            "{name}: {} agents, obs_dim {}, {} actions, horizon {}",
            spec.n_agents, spec.obs_dim, spec.n_actions, spec.max_episode_steps
        );
        let obs = env.reset();
        for i in 0..spec.n_agents {
            println!("  agent {i} shared slice {:?}", env.shared_state(i, obs.row(i)));
        }
        let mut ret = 0.0;
        loop {
            let actions: Vec<usize> = (0..spec.n_agents).map(|_| rng.gen_range(0..spec.n_actions)).collect();
            let step = env.step(&actions)?;
            ret += step.reward;
            if step.continuation == 0.0 {
                println!(
                    "  ended after {} steps, return {ret:+.2}, success {}, truncated {}",
                    env.step_count(),
                    step.info.success,
                    step.info.truncated
                );
                break;
            }
        }
    }
    Ok(())
}
