//! Trains the full model and the obs-fusion ablation under the same budget
//! on switch_corridor, then scores both with GCI and GPE on identical real
//! episodes.
//!
//! ```text
//! cargo run --release --example ablation_gci -- [seeds] [pairs]
//! ```

use gawm::config::RunConfig;
use gawm::metrics::{build_paired_segments, gci, gpe, mean_std, MetricConfig, ModelPredictor};
use gawm::trainer::Trainer;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(Ok(3), |s| s.parse())?;
    let count: usize = args.get(1).map_or(Ok(200), |s| s.parse())?;
    let mc = MetricConfig::default();
    let mut pooled = [Vec::new(), Vec::new()];
    let mut pooled_gpe = [Vec::new(), Vec::new()];
    for seed in 0..seeds {
        for (v, fusion) in [true, false].into_iter().enumerate() {
            let config = RunConfig::from_toml_str(
                include_str!("../configs/switch_corridor.toml"),
                &[format!("seed={seed}"), format!("world_model.obs_fusion_enabled={fusion}")],
            )?;
            let mut trainer = Trainer::new(config.clone())?;
            trainer.warmup()?;
            for _ in 0..config.trainer.n_outer {
                trainer.outer_iteration()?;
            }
            let eval = trainer.evaluate(config.trainer.eval_episodes)?;
            let pairs = build_paired_segments(
                &ModelPredictor { model: &trainer.world_model },
                None,
                "switch_corridor",
                count,
                3,
                1000 + seed,
            )?;
            let g: Vec<f64> = pairs.iter().map(|p| gci(p, &mc)).collect::<Result<_, _>>()?;
            let e: Vec<f64> = pairs.iter().map(gpe).collect::<Result<_, _>>()?;
            let (gm, gs) = mean_std(&g);
            let (em, es) = mean_std(&e);
            println!(
                "seed {seed} obs_fusion={fusion:<5} success {:.2} | GCI {gm:.4}±{gs:.4} | GPE {em:.4}±{es:.4}",
                eval.success_rate
            );
            pooled[v].extend(g);
            pooled_gpe[v].extend(e);
        }
    }
    for (v, name) in ["full", "no obs-fusion"].iter().enumerate() {
        let (gm, gs) = mean_std(&pooled[v]);
        let (em, es) = mean_std(&pooled_gpe[v]);
        println!("pooled {name:<14} GCI {gm:.4}±{gs:.4} GPE {em:.4}±{es:.4}");
    }
    Ok(())
}
