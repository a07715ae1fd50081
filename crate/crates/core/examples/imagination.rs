//! Imagined rollouts: seed from real steps, roll the prior with the policy.

use gawm::autograd::Adam;
use gawm::buffer::{PseudoBuffer, RealBuffer};
use gawm::config::TrainerConfig;
use gawm::env::make_env;
use gawm::policy::{Policy, PolicyConfig};
use gawm::smoothing::SmoothingConfig;
use gawm::trainer::{collect_episode, generate_imagination, train_world_model_phase, Behavior};
use gawm::world_model::{WorldModel, WorldModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut env = make_env("switch_corridor", 2)?;
    let spec = env.spec().clone();
    let mut real = RealBuffer::new(50)?;
    for id in 0..30 {
        real.push(collect_episode(env.as_mut(), Behavior::Random, &SmoothingConfig::default(), id, 2, &mut rng)?)?;
    }
    let wm_config = WorldModelConfig {
        h_dim: 16,
        e_dim: 16,
        g_dim: 16,
        hidden: 32,
        n_categoricals: 4,
        n_classes: 4,
        ..WorldModelConfig::default()
    };
    let mut wm = WorldModel::new(wm_config, spec.n_agents, spec.obs_dim, spec.n_actions, 3)?;
    let mut opt = Adam::new(&wm.params, 3e-3);
    let tc = TrainerConfig {
        e_m: 200,
        wm_batch: 8,
        window_len: 8,
        ..TrainerConfig::default()
    };
    let losses = train_world_model_phase(&mut wm, &mut opt, &real, &tc, &mut rng)?;
    println!("world model loss {:.3} -> {:.3}", losses[0].total, losses[losses.len() - 1].total);

    let policy = Policy::new(PolicyConfig::default(), spec.n_agents, spec.obs_dim, spec.n_actions, 4)?;
    let mut pseudo = PseudoBuffer::new(100)?;
    let made = generate_imagination(&wm, &policy, &real, &mut pseudo, 5, 6, &mut rng)?;
    println!("{made} imagined segments");
    for seg in pseudo.segments() {
        println!(
            "  from episode {} step {}: {} steps, rewards {:+.2?}, continuation {:.2?}",
            seg.origin.episode_id,
            seg.origin.t,
            seg.len(),
            seg.rewards,
            seg.continuations
        );
    }
    Ok(())
}
