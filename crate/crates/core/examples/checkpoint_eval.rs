//! Short training run, checkpoint, reload, and greedy evaluation of both.

use gawm::checkpoint::Checkpoint;
use gawm::config::RunConfig;
use gawm::trainer::{eval_seed, evaluate, run_training};

fn main() -> anyhow::Result<()> {
    let config = RunConfig::from_toml_str(include_str!("../configs/smoke.toml"), &[])?;
    let dir = std::env::temp_dir().join("gawm_checkpoint_example");
    let report = run_training(&config, Some(&dir))?;
    println!("trained {} env steps; files in {}", report.env_steps, dir.display());

    let ck = Checkpoint::load(dir.join(&config.logging.checkpoint_file))?;
    let (_, policy) = ck.instantiate()?;
    let again = evaluate(&policy, &config.env.name, config.trainer.eval_episodes, eval_seed(config.seed))?;
    println!("in-run eval   {:?}", report.final_eval);
    println!("reloaded eval {:?}", again);
    println!("identical: {}", again == report.final_eval);
    Ok(())
}
