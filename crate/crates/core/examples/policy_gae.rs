//! Advantage estimation and the clipped surrogate, then a decentralized
//! actor acting from local observations only.

use gawm::policy::{compute_gae, normalize_advantages, ppo_surrogate, ActionMode, Policy, PolicyConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let gae = compute_gae(&[1.0, 0.0], &[0.5, 0.2], 0.0, &[1.0, 0.0], 0.99, 0.95)?;
    println!("advantages {:.5?} returns {:.5?}", gae.advantages, gae.returns);
    println!("normalized {:.4?}", normalize_advantages(&[1.0, 2.0, 3.0, 4.0]));
    for (ratio, adv) in [(1.5, 1.0), (0.5, -1.0), (0.9, 2.0)] {
        println!("surrogate(ratio {ratio}, adv {adv:+}) = {:+.2}", ppo_surrogate(ratio, adv, 0.2));
    }

    let policy = Policy::new(PolicyConfig::default(), 2, 5, 3, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = Array2::from_shape_fn((2, 5), |(i, j)| ((i + j) % 2) as f64);
    let mut state = policy.initial_state(1);
    for t in 0..3 {
        let out = policy.act(&obs, &state, ActionMode::Sample, &mut rng)?;
        println!("t={t} actions {:?} log-probs {:.3?}", out.actions, out.log_probs);
        state = out.state;
    }
    println!("critic values {:.4?}", policy.evaluate_value(&obs)?);
    Ok(())
}
