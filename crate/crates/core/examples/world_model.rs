//! Fits a small world model to random switch_corridor episodes and compares
//! the full model with the obs-fusion ablation.

use gawm::autograd::Adam;
use gawm::buffer::RealBuffer;
use gawm::env::make_env;
use gawm::smoothing::SmoothingConfig;
use gawm::trainer::{collect_episode, Behavior};
use gawm::world_model::{LatentSampling, WorldModel, WorldModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut env = make_env("switch_corridor", 0)?;
    let spec = env.spec().clone();
    let mut real = RealBuffer::new(100)?;
    for id in 0..40 {
        real.push(collect_episode(env.as_mut(), Behavior::Random, &SmoothingConfig::default(), id, 0, &mut rng)?)?;
    }

    for obs_fusion in [true, false] {
        let config = WorldModelConfig {
            h_dim: 16,
            e_dim: 16,
            g_dim: 16,
            hidden: 32,
            n_categoricals: 4,
            n_classes: 4,
            obs_fusion_enabled: obs_fusion,
            ..WorldModelConfig::default()
        };
        let mut wm = WorldModel::new(config, spec.n_agents, spec.obs_dim, spec.n_actions, 1)?;
        let mut opt = Adam::new(&wm.params, 3e-3);
        for step in 0..=300 {
            let batch = real.sample_real_windows(8, 8, rng.gen())?;
            let loss = wm.train_step(&mut opt, &batch, 10.0, &mut rng)?;
            if step % 100 == 0 {
                println!(
                    "obs_fusion={obs_fusion} step {step:>3}: total {:.3} obs {:.3} reward {:.3} disc {:.3} kl {:.3}",
                    loss.total, loss.obs_nll, loss.reward_nll, loss.discount_nll, loss.kl_raw
                );
            }
        }
        let ep = real.episode(0).expect("stored");
        let seq = real.sample_real_windows(1, ep.len().min(4), 3)?;
        let steps = wm.observe_sequence(&seq, LatentSampling::Mode, &mut rng)?;
        let last = steps.last().expect("non-empty");
        println!("  predicted reward at the window end {:.3?}", last.reconstruction.reward_mean);
    }
    Ok(())
}
