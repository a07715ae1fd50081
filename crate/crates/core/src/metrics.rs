//! Offline world-model quality metrics over paired real/imagined segments.
//!
//! For a segment of `T` steps and `N` agents, with per-step agent means
//! written with a bar:
//!
//! ```text
//! GCI = 1/T sum_t 1/N sum_i ( |s_hat[t,i] - s_bar[t]|_2
//!                             + 1{|r_hat[t,i] - r_bar[t]| > eps_r}
//!                             + 1{|c_hat[t,i] - c_bar[t]| > eps_c} )
//!
//! GPE = 1/T sum_t 1/N sum_i ( |o_hat[t,i] - o[t,i]|_2
//!                             + |r_hat[t,i] - r[t]| + |c_hat[t,i] - c[t]| )
//! ```
//!
//! GCI measures how much the agents' own predictions disagree with each
//! other; GPE measures how far they are from the truth. The state term of
//! GCI is an unnormalized distance, so its scale depends on the size of the
//! environment's shared-feature slice.
//!
//! Each imagined agent state `s_hat[t,i]` is the environment's shared-feature
//! slice of agent `i`'s reconstructed observation, and `r_hat[t,i]`,
//! `c_hat[t,i]` come from the reward and continuation heads evaluated on agent
//! `i`'s latent alone.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::buffer::EpisodeTrajectory;
use crate::env::{make_env, Environment};
use crate::error::{GawmError, Result};
use crate::policy::{ActionMode, Policy};
use crate::smoothing::SmoothingConfig;
use crate::trainer::{collect_episode, Behavior};
use crate::world_model::{LatentSampling, SequenceBatch, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub epsilon_r: f64,
    pub epsilon_gamma: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            epsilon_r: 0.05,
            epsilon_gamma: 0.05,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_r > 0.0) || !(self.epsilon_gamma > 0.0) {
            return Err(GawmError::Config("metric thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth at one step: the joint observation and the team reward and
/// continuation of the transition that led to it.
#[derive(Clone, Debug, PartialEq)]
pub struct RealStep {
    pub obs: Tensor,
    pub reward: f64,
    pub continuation: f64,
}

/// Per-agent predictions at one step; every field has one entry per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoStep {
    pub shared_state: Vec<Vec<f64>>,
    pub obs: Tensor,
    pub reward: Vec<f64>,
    pub continuation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSegment {
    pub real: Vec<RealStep>,
    pub pseudo: Vec<PseudoStep>,
}

impl PairedSegment {
    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.pseudo.first().map_or(0, |p| p.obs.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        if self.real.is_empty() || self.real.len() != self.pseudo.len() {
            return Err(GawmError::Input(format!(
                "segment has {} real and {} imagined steps",
                self.real.len(),
                self.pseudo.len()
            )));
        }
        let n = self.n_agents();
        if n == 0 {
            return Err(GawmError::Input("segment has no agents".into()));
        }
        for (r, p) in self.real.iter().zip(&self.pseudo) {
            if p.obs.nrows() != n
                || p.shared_state.len() != n
                || p.reward.len() != n
                || p.continuation.len() != n
                || r.obs.dim() != p.obs.dim()
            {
                return Err(GawmError::Input("segment arrays disagree on agents or widths".into()));
            }
            let w = p.shared_state[0].len();
            if p.shared_state.iter().any(|s| s.len() != w) {
                return Err(GawmError::Input("shared-state estimates differ in width".into()));
            }
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn gci(segment: &PairedSegment, config: &MetricConfig) -> Result<f64> {
    segment.validate()?;
    let n = segment.n_agents() as f64;
    let mut total = 0.0;
    for p in &segment.pseudo {
        let width = p.shared_state[0].len();
        let centre: Vec<f64> = (0..width)
            .map(|k| p.shared_state.iter().map(|s| s[k]).sum::<f64>() / n)
            .collect();
        let r_bar = mean(&p.reward);
        let c_bar = mean(&p.continuation);
        let mut step = 0.0;
        for i in 0..p.reward.len() {
            let dist = p.shared_state[i]
                .iter()
                .zip(&centre)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let r_off = ((p.reward[i] - r_bar).abs() > config.epsilon_r) as u8 as f64;
            let c_off = ((p.continuation[i] - c_bar).abs() > config.epsilon_gamma) as u8 as f64;
            step += dist + r_off + c_off;
        }
        total += step / n;
    }
    Ok(total / segment.len() as f64)
}

pub fn gpe(segment: &PairedSegment) -> Result<f64> {
    segment.validate()?;
    let n = segment.n_agents() as f64;
    let mut total = 0.0;
    for (r, p) in segment.real.iter().zip(&segment.pseudo) {
        let mut step = 0.0;
        for i in 0..p.reward.len() {
            let dist = (&p.obs.row(i) - &r.obs.row(i)).mapv(|x| x * x).sum().sqrt();
            step += dist + (p.reward[i] - r.reward).abs() + (p.continuation[i] - r.continuation).abs();
        }
        total += step / n;
    }
    Ok(total / segment.len() as f64)
}

/// Produces imagined per-agent predictions for `len` steps following step
/// `start` of a real episode, driven by the episode's own actions.
pub trait SegmentPredictor {
    fn predict(
        &self,
        env: &dyn Environment,
        episode: &EpisodeTrajectory,
        start: usize,
        len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<PseudoStep>>;
}

/// Posterior on the real prefix `0..=start`, then prior steps on the real
/// actions.
pub struct ModelPredictor<'a> {
    pub model: &'a WorldModel,
}

impl SegmentPredictor for ModelPredictor<'_> {
    fn predict(
        &self,
        env: &dyn Environment,
        episode: &EpisodeTrajectory,
        start: usize,
        len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<PseudoStep>> {
        let prefix = SequenceBatch {
            batch: 1,
            obs: episode.observations[..=start].to_vec(),
            actions: episode.actions[..start].to_vec(),
            rewards: episode.rewards_smoothed[..start].iter().map(|&r| vec![r]).collect(),
            continuations: episode.continuations[..start].iter().map(|&c| vec![c]).collect(),
        };
        let observed = self.model.observe_sequence(&prefix, LatentSampling::Sample, rng)?;
        let mut latent = observed.last().expect("non-empty prefix").latent.clone();
        let mut out = Vec::with_capacity(len);
        for j in 0..len {
            let (next, recon) =
                self.model
                    .imagine_step(&latent, &episode.actions[start + j], LatentSampling::Sample, rng)?;
            let heads = self.model.reconstruct_per_agent(&next.h, &next.z)?;
            out.push(PseudoStep {
                shared_state: (0..recon.obs_mean.nrows())
                    .map(|i| env.shared_state(i, recon.obs_mean.row(i)))
                    .collect(),
                obs: recon.obs_mean,
                reward: heads.reward_mean,
                continuation: heads.continuation_prob,
            });
            latent = next;
        }
        Ok(out)
    }
}

/// Copies the true outcomes; every error term is zero.
pub struct OraclePredictor;

impl SegmentPredictor for OraclePredictor {
    fn predict(
        &self,
        env: &dyn Environment,
        episode: &EpisodeTrajectory,
        start: usize,
        len: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<PseudoStep>> {
        Ok((1..=len)
            .map(|j| {
                let t = start + j;
                let obs = episode.observations[t].clone();
                let n = obs.nrows();
                PseudoStep {
                    shared_state: (0..n).map(|i| env.shared_state(i, obs.row(i))).collect(),
                    obs,
                    reward: vec![episode.rewards_raw[t - 1]; n],
                    continuation: vec![episode.continuations[t - 1]; n],
                }
            })
            .collect())
    }
}

/// Rolls real episodes and pairs one uniformly placed segment of each
/// episode long enough with the predictor's output. Episodes shorter than
/// `segment_len` are skipped; giving up after `200 * count` episodes
/// without enough pairs is a state error.
pub fn build_paired_segments(
    predictor: &dyn SegmentPredictor,
    policy: Option<&Policy>,
    env_name: &str,
    count: usize,
    segment_len: usize,
    seed: u64,
) -> Result<Vec<PairedSegment>> {
    if count == 0 || segment_len == 0 {
        return Err(GawmError::Input("count and segment length must be >= 1".into()));
    }
    let mut env = make_env(env_name, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let off = SmoothingConfig {
        enabled: false,
        ..SmoothingConfig::default()
    };
    let behavior = match policy {
        Some(p) => Behavior::Policy(p, ActionMode::Sample),
        None => Behavior::Random,
    };
    let mut pairs = Vec::with_capacity(count);
    let mut attempts = 0;
    while pairs.len() < count {
        attempts += 1;
        if attempts > 200 * count {
            return Err(GawmError::State(format!(
                "only {} of {count} episodes had {segment_len} transitions",
                pairs.len()
            )));
        }
        let ep = collect_episode(env.as_mut(), behavior, &off, attempts as u64, seed, &mut rng)?;
        if ep.len() < segment_len {
            continue;
        }
        pairs.push(pair_at_random_offset(predictor, env.as_ref(), &ep, segment_len, &mut rng)?);
    }
    Ok(pairs)
}

/// Like [`build_paired_segments`] but draws from stored episodes (for
/// example a trajectory log), picking episodes uniformly among those with at
/// least `segment_len` transitions.
pub fn pair_logged_segments(
    predictor: &dyn SegmentPredictor,
    env_name: &str,
    episodes: &[EpisodeTrajectory],
    count: usize,
    segment_len: usize,
    seed: u64,
) -> Result<Vec<PairedSegment>> {
    if count == 0 || segment_len == 0 {
        return Err(GawmError::Input("count and segment length must be >= 1".into()));
    }
    let env = make_env(env_name, seed)?;
    let spec = env.spec();
    for ep in episodes {
        let fits = ep.observations.iter().all(|o| o.dim() == (spec.n_agents, spec.obs_dim))
            && ep.actions.iter().flatten().all(|&a| a < spec.n_actions);
        if !fits {
            return Err(GawmError::Incompatible(format!(
                "episode {} does not match the {env_name} observation and action spaces",
                ep.episode_id
            )));
        }
    }
    let usable: Vec<&EpisodeTrajectory> = episodes.iter().filter(|e| e.len() >= segment_len).collect();
    if usable.is_empty() {
        return Err(GawmError::State(format!("no stored episode has {segment_len} transitions")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let ep = usable[rng.gen_range(0..usable.len())];
            pair_at_random_offset(predictor, env.as_ref(), ep, segment_len, &mut rng)
        })
        .collect()
}

fn pair_at_random_offset(
    predictor: &dyn SegmentPredictor,
    env: &dyn Environment,
    ep: &EpisodeTrajectory,
    segment_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairedSegment> {
    let start = rng.gen_range(0..=ep.len() - segment_len);
    let pseudo = predictor.predict(env, ep, start, segment_len, rng)?;
    let real = (1..=segment_len)
        .map(|j| RealStep {
            obs: ep.observations[start + j].clone(),
            reward: ep.rewards_raw[start + j - 1],
            continuation: ep.continuations[start + j - 1],
        })
        .collect();
    Ok(PairedSegment { real, pseudo })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub env: String,
    pub pairs: usize,
    pub gci_mean: f64,
    pub gci_std: f64,
    pub gpe_mean: f64,
    pub gpe_std: f64,
    pub epsilon_r: f64,
    pub epsilon_gamma: f64,
}

impl MetricReport {
    pub fn gci_cell(&self) -> String {
        format!("{:.4}±{:.4}", self.gci_mean, self.gci_std)
    }

    pub fn gpe_cell(&self) -> String {
        format!("{:.4}±{:.4}", self.gpe_mean, self.gpe_std)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

pub fn metric_report(
    pairs: &[PairedSegment],
    config: &MetricConfig,
    variant: &str,
    env: &str,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(GawmError::Input("no segment pairs to summarize".into()));
    }
    config.validate()?;
    let g: Vec<f64> = pairs.iter().map(|p| gci(p, config)).collect::<Result<_>>()?;
    let e: Vec<f64> = pairs.iter().map(gpe).collect::<Result<_>>()?;
    let (gci_mean, gci_std) = mean_std(&g);
    let (gpe_mean, gpe_std) = mean_std(&e);
    Ok(MetricReport {
        variant: variant.into(),
        env: env.into(),
        pairs: pairs.len(),
        gci_mean,
        gci_std,
        gpe_mean,
        gpe_std,
        epsilon_r: config.epsilon_r,
        epsilon_gamma: config.epsilon_gamma,
    })
}

/// One summary row per variant.
pub fn write_report_csv(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| GawmError::Format(e.to_string()))?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| GawmError::io(path, e))
}

/// Rows are environments, columns are variants, cells are `mean±std` of
/// `metric` ("gci" or "gpe").
pub fn write_table_csv(path: impl AsRef<Path>, reports: &[MetricReport], metric: &str) -> Result<()> {
    let path = path.as_ref();
    let mut variants: Vec<&str> = Vec::new();
    let mut envs: Vec<&str> = Vec::new();
    for r in reports {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
        if !envs.contains(&r.env.as_str()) {
            envs.push(&r.env);
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| GawmError::Format(e.to_string()))?;
    let mut header = vec!["env"];
    header.extend(&variants);
    w.write_record(&header)?;
    for env in envs {
        let mut row = vec![env.to_string()];
        for v in &variants {
            let cell = reports
                .iter()
                .find(|r| r.env == env && r.variant == *v)
                .map(|r| if metric == "gpe" { r.gpe_cell() } else { r.gci_cell() })
                .unwrap_or_default();
            row.push(cell);
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| GawmError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn step(states: Vec<Vec<f64>>, obs: Tensor, r: Vec<f64>, c: Vec<f64>) -> PseudoStep {
        PseudoStep {
            shared_state: states,
            obs,
            reward: r,
            continuation: c,
        }
    }

    #[test]
    fn gci_worked_example() {
        let seg = PairedSegment {
            real: vec![RealStep {
                obs: array![[0.0], [0.0]],
                reward: 0.0,
                continuation: 1.0,
            }],
            pseudo: vec![step(
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                array![[0.0], [0.0]],
                vec![1.0, 1.2],
                vec![0.9, 0.9],
            )],
        };
        let v = gci(&seg, &MetricConfig::default()).unwrap();
        assert!((v - 1.707107).abs() < 1e-6, "{v}");
    }

    #[test]
    fn gpe_worked_example() {
        let seg = PairedSegment {
            real: vec![RealStep {
                obs: array![[0.0, 1.0]],
                reward: 1.0,
                continuation: 1.0,
            }],
            pseudo: vec![step(vec![vec![0.0]], array![[1.0, 1.0]], vec![0.5], vec![0.9])],
        };
        assert!((gpe(&seg).unwrap() - 1.6).abs() < 1e-9);
        assert_eq!(gci(&seg, &MetricConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_is_input_error() {
        let seg = PairedSegment {
            real: vec![],
            pseudo: vec![step(vec![vec![0.0]], array![[1.0]], vec![0.5], vec![0.9])],
        };
        assert!(matches!(gpe(&seg), Err(GawmError::Input(_))));
        assert!(matches!(gci(&seg, &MetricConfig::default()), Err(GawmError::Input(_))));
    }

    #[test]
    fn report_statistics() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.414214).abs() < 1e-6);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        assert!(metric_report(&[], &MetricConfig::default(), "x", "y").is_err());
    }

    #[test]
    fn oracle_pairs_have_zero_error() {
        let pairs = build_paired_segments(&OraclePredictor, None, "switch_corridor", 10, 2, 3).unwrap();
        assert_eq!(pairs.len(), 10);
        for p in &pairs {
            assert_eq!(p.len(), 2);
            assert_eq!(gpe(p).unwrap(), 0.0);
            assert_eq!(gci(p, &MetricConfig::default()).unwrap(), 0.0);
        }
        let again = build_paired_segments(&OraclePredictor, None, "switch_corridor", 10, 2, 3).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn logged_episodes_pair_like_fresh_ones() {
        let mut env = make_env("switch_corridor", 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps: Vec<_> = (0..5)
            .map(|i| collect_episode(env.as_mut(), Behavior::Random, &SmoothingConfig::default(), i, 1, &mut rng).unwrap())
            .collect();
        let pairs = pair_logged_segments(&OraclePredictor, "switch_corridor", &eps, 7, 1, 2).unwrap();
        assert_eq!(pairs.len(), 7);
        assert!(pairs.iter().all(|p| gpe(p).unwrap() == 0.0));
        assert!(pair_logged_segments(&OraclePredictor, "switch_corridor", &eps, 7, 99, 2).is_err());
        assert!(matches!(
            pair_logged_segments(&OraclePredictor, "coop_capture", &eps, 7, 1, 2),
            Err(GawmError::Incompatible(_))
        ));
    }

    #[test]
    fn impossible_segment_length_is_state_error() {
        assert!(matches!(
            build_paired_segments(&OraclePredictor, None, "switch_corridor", 1, 50, 0),
            Err(GawmError::State(_))
        ));
    }
}
