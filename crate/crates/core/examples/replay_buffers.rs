//! The two replay buffers: real episodes for the model, imagined segments
//! for the policy.

use gawm::buffer::{Fifo, RealBuffer};
use gawm::env::make_env;
use gawm::smoothing::SmoothingConfig;
use gawm::trainer::{collect_episode, Behavior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut fifo = Fifo::new(3)?;
    for x in 0..5 {
        if let Some(old) = fifo.push(x) {
            println!("pushed {x}, evicted {old}");
        }
    }
    println!("fifo now {:?}", fifo.iter().collect::<Vec<_>>());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut env = make_env("coop_capture", 1)?;
    let mut real = RealBuffer::new(4)?;
    for id in 0..6 {
        real.push(collect_episode(env.as_mut(), Behavior::Random, &SmoothingConfig::default(), id, 1, &mut rng)?)?;
    }
    let ids: Vec<u64> = real.episodes().map(|e| e.episode_id).collect();
    println!("real buffer holds episodes {ids:?}, {} transitions", real.total_transitions());
    let a = real.sample_windows(3, 5, 42)?;
    let b = real.sample_windows(3, 5, 42)?;
    for w in &a {
        println!("  window: episode {} start {} len {}", w.episode_id, w.start, w.actions.len());
    }
    println!("same seed, same windows: {}", a == b);
    println!("seed steps {:?}", real.sample_seed_steps(4, 9)?);
    Ok(())
}
