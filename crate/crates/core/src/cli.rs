//! The `gawm` command line.
//!
//! ```text
//! gawm [--config FILE] [--set key=value]... [--seed N] [--out DIR] <command>
//!
//!   train                          run the full training loop
//!   eval  --checkpoint FILE        greedy success rate over --episodes
//!   gci   --checkpoint FILE...     consistency report (also records GPE)
//!   gpe   --checkpoint FILE...     prediction-error report (also records GCI)
//!   export-plots RUN.csv...        merge metrics files into one tidy CSV
//!   replay FILE.jsonl              summarize a trajectory log
//! ```
//!
//! The output directory is `--out`, else `$GAWM_OUT`, else `runs`. Every
//! command writes `resolved_config.toml` there. Exit codes: 0 success,
//! 2 usage or bad input, 3 incompatible artifact, 1 anything else.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{GawmError, Result};
use crate::logs::{episodes_from_records, read_metrics, read_trajectories, tidy_export, write_tidy, Source};
use crate::metrics::{
    build_paired_segments, metric_report, pair_logged_segments, write_report_csv, write_table_csv, MetricConfig,
    MetricReport, ModelPredictor, OraclePredictor, SegmentPredictor,
};
use crate::trainer::{eval_seed, evaluate, evaluate_random, run_training};

pub const OUT_ENV: &str = "GAWM_OUT";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Parser, Debug)]
#[command(name = "gawm", version, about = "Global-aware world models for cooperative multi-agent RL")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `trainer.k=4`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Replaces the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    Train,
    Eval(EvalArgs),
    Gci(MetricArgs),
    Gpe(MetricArgs),
    ExportPlots(ExportArgs),
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the uniform-random team instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random: bool,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
}

#[derive(Args, Debug)]
pub struct MetricArgs {
    /// One model variant per checkpoint. Real episodes are rolled by the
    /// first checkpoint's policy.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Variant names, matched to checkpoints in order; file stems otherwise.
    #[arg(long)]
    pub variant: Vec<String>,
    /// Add a variant that copies the true outcomes.
    #[arg(long)]
    pub oracle: bool,
    /// Draw real episodes from a trajectory log instead of rolling new ones.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub segment_len: usize,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon_r: f64,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon_gamma: f64,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Metrics CSVs, one per run.
    pub metrics: Vec<PathBuf>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "tidy.csv")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub trajectories: PathBuf,
    /// Print every step of this episode.
    #[arg(long)]
    pub episode: Option<u64>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_toml_str("", &overrides),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| GawmError::io(out, e))?;
    let dump = out.join(RESOLVED_CONFIG);
    std::fs::write(&dump, config.to_toml()).map_err(|e| GawmError::io(&dump, e))?;
    match &cli.command {
        Command::Train => train(&config, out),
        Command::Eval(a) => eval(cli, &config, a),
        Command::Gci(a) => metrics(cli, &config, a, "gci", out),
        Command::Gpe(a) => metrics(cli, &config, a, "gpe", out),
        Command::ExportPlots(a) => export(a, out),
        Command::Replay(a) => replay(a),
    }
}

fn train(config: &RunConfig, out: &Path) -> Result<()> {
    let report = run_training(config, Some(out))?;
    println!(
        "trained {} outer episodes, {} env steps, {:.1}s",
        report.records.len(),
        report.env_steps,
        report.wall_clock_s
    );
    println!(
        "final eval: success rate {:.4} (std {:.4}) over {} episodes",
        report.final_eval.success_rate, report.final_eval.success_std, report.final_eval.episodes
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn eval(cli: &Cli, config: &RunConfig, a: &EvalArgs) -> Result<()> {
    if a.episodes == 0 {
        return Err(GawmError::Input("--episodes must be >= 1".into()));
    }
    let result = match &a.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (_, policy) = ck.instantiate()?;
            let seed = cli.seed.unwrap_or(ck.config.seed);
            evaluate(&policy, &ck.config.env.name, a.episodes, eval_seed(seed))?
        }
        None => evaluate_random(&config.env.name, a.episodes, eval_seed(config.seed))?,
    };
    println!(
        "success_rate {:.6} std {:.6} episodes {} mean_return {:.6} mean_length {:.3}",
        result.success_rate, result.success_std, result.episodes, result.mean_return, result.mean_length
    );
    Ok(())
}

fn metrics(cli: &Cli, config: &RunConfig, a: &MetricArgs, metric: &str, out: &Path) -> Result<()> {
    if a.checkpoint.is_empty() && !a.oracle {
        return Err(GawmError::Input("give at least one --checkpoint or --oracle".into()));
    }
    if a.variant.len() > a.checkpoint.len() {
        return Err(GawmError::Input("more --variant names than checkpoints".into()));
    }
    let mc = MetricConfig {
        epsilon_r: a.epsilon_r,
        epsilon_gamma: a.epsilon_gamma,
    };
    mc.validate()?;
    let mut loaded = Vec::new();
    for (i, path) in a.checkpoint.iter().enumerate() {
        let ck = Checkpoint::load(path)?;
        let models = ck.instantiate()?;
        let name = a.variant.get(i).cloned().unwrap_or_else(|| {
            path.file_stem().map_or_else(|| format!("model{i}"), |s| s.to_string_lossy().into_owned())
        });
        loaded.push((name, ck.config.env.name.clone(), models));
    }
    let env = loaded.first().map_or(config.env.name.clone(), |l| l.1.clone());
    if let Some(other) = loaded.iter().find(|l| l.1 != env) {
        return Err(GawmError::Incompatible(format!(
            "variant {} was trained on {}, not {env}",
            other.0, other.1
        )));
    }
    let seed = cli.seed.unwrap_or(config.seed);
    let logged = match &a.trajectories {
        Some(path) => Some(episodes_from_records(&read_trajectories(path)?, &env)?),
        None => None,
    };
    let rollout_policy = loaded.first().map(|l| &l.2 .1);
    let pairs = |p: &dyn SegmentPredictor| match &logged {
        Some(eps) => pair_logged_segments(p, &env, eps, a.count, a.segment_len, seed),
        None => build_paired_segments(p, rollout_policy, &env, a.count, a.segment_len, seed),
    };

    let mut reports: Vec<MetricReport> = Vec::new();
    for (name, _, (wm, _)) in &loaded {
        let segs = pairs(&ModelPredictor { model: wm })?;
        reports.push(metric_report(&segs, &mc, name, &env)?);
    }
    if a.oracle {
        reports.push(metric_report(&pairs(&OraclePredictor)?, &mc, "oracle", &env)?);
    }
    for r in &reports {
        println!(
            "{} {}: pairs {} gci {} gpe {}",
            r.env,
            r.variant,
            r.pairs,
            r.gci_cell(),
            r.gpe_cell()
        );
    }
    let json = out.join(format!("{metric}_report.json"));
    std::fs::write(&json, serde_json::to_string_pretty(&reports)?).map_err(|e| GawmError::io(&json, e))?;
    write_report_csv(out.join(format!("{metric}_report.csv")), &reports)?;
    write_table_csv(out.join(format!("{metric}_table.csv")), &reports, metric)?;
    Ok(())
}

fn export(a: &ExportArgs, out: &Path) -> Result<()> {
    if a.metrics.is_empty() {
        return Err(GawmError::Input("export-plots needs at least one metrics CSV".into()));
    }
    let runs = a
        .metrics
        .iter()
        .map(|p| {
            let id = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((id, read_metrics(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seen = std::collections::HashSet::new();
    let runs: Vec<_> = runs
        .into_iter()
        .enumerate()
        .map(|(i, (id, rows))| if seen.insert(id.clone()) { (id, rows) } else { (format!("{id}#{i}"), rows) })
        .collect();
    let rows = tidy_export(&runs);
    let path = out.join(&a.output);
    write_tidy(&path, &rows)?;
    println!("{} rows from {} runs -> {}", rows.len(), runs.len(), path.display());
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let records = read_trajectories(&a.trajectories)?;
    let mut order: Vec<(u64, Source)> = Vec::new();
    for r in &records {
        if !order.contains(&(r.episode_id, r.source)) {
            order.push((r.episode_id, r.source));
        }
    }
    println!("{} records, {} episodes or segments", records.len(), order.len());
    for (id, source) in order {
        let steps: Vec<_> = records.iter().filter(|r| r.episode_id == id && r.source == source).collect();
        let ret: f64 = steps.iter().filter_map(|r| r.reward_raw).sum();
        let transitions = steps.iter().filter(|r| r.action.is_some()).count();
        let terminated = steps.iter().any(|r| r.continuation == Some(0.0));
        println!(
            "{source:?} {id}: {transitions} transitions, return {ret:.4}, {}",
            if terminated { "ended" } else { "open" }
        );
        if a.episode == Some(id) {
            for r in steps {
                println!(
                    "  t={} action={:?} reward={:?} continuation={:?} obs={:?}",
                    r.t, r.action, r.reward_raw, r.continuation, r.obs
                );
            }
        }
    }
    Ok(())
}
