//! Trains GAWM on coop_capture and prints progress.
//!
//! ```text
//! cargo run --release --example train_coop_capture -- [config.toml] [key=value ...]
//! ```
//!
//! Without a config file the bundled `configs/coop_capture.toml` is used.

use gawm::config::RunConfig;
use gawm::trainer::{eval_seed, evaluate_random, Trainer};

fn main() -> anyhow::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let text = match args.first() {
        Some(a) if !a.contains('=') => std::fs::read_to_string(args.remove(0))?,
        _ => include_str!("../configs/coop_capture.toml").to_string(),
    };
    let config = RunConfig::from_toml_str(&text, &args)?;
    let tc = config.trainer.clone();

    let baseline = evaluate_random(&config.env.name, tc.eval_episodes, eval_seed(config.seed))?;
    println!("random baseline success rate {:.4}", baseline.success_rate);

    let mut trainer = Trainer::new(config)?;
    trainer.warmup()?;
    let mut successes = 0;
    let mut recent = Vec::new();
    for i in 0..tc.n_outer {
        let rec = trainer.outer_iteration()?;
        successes += rec.episode_success as usize;
        recent.push(rec);
        let last = i + 1 == tc.n_outer || trainer.budget_spent();
        if last || (i + 1) % tc.eval_every.max(1) == 0 {
            let n = recent.len() as f64;
            let ret = recent.iter().map(|r| r.episode_return).sum::<f64>() / n;
            let wm = recent.last().map(|r| r.world_model.clone()).unwrap_or_default();
            let pl = recent.last().map(|r| r.policy.clone()).unwrap_or_default();
            let eval = trainer.evaluate(tc.eval_episodes)?;
            println!(
                "outer {:>5} steps {:>6} | real successes {:>4} | return {:+.3} | wm obs {:.3} rew {:.4} kl {:.3} | entropy {:.3} | greedy {:.3}",
                i + 1,
                trainer.env_steps,
                successes,
                ret,
                wm.obs_nll,
                wm.reward_nll,
                wm.kl_raw,
                pl.entropy,
                eval.success_rate
            );
            recent.clear();
        }
        if last {
            break;
        }
    }
    Ok(())
}
