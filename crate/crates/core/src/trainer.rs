//! The training loop.
//!
//! After a few random warmup episodes every outer iteration
//!
//! 1. collects one real episode with the current policy (sampling actions),
//!    smooths its rewards and stores it in the real buffer;
//! 2. fits the world model for `e_m` steps on windows from the real buffer;
//! 3. clears the pseudo buffer, then `e_pi` times generates imagined
//!    segments from real seed steps and runs `e_sample` PPO updates on
//!    segments drawn from the pseudo buffer;
//! 4. optionally evaluates the greedy policy and writes a metrics row.
//!
//! The policy never trains on real observations: imagined segments start
//! from the world model's reconstruction of the seed step.
//!
//! Everything runs on one thread and draws randomness from a single seeded
//! generator, so a configuration and seed fully determine the outputs.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Tensor};
use crate::buffer::{EpisodeMeta, EpisodeTrajectory, PseudoBuffer, PseudoSegment, RealBuffer, SegmentOrigin};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainerConfig};
use crate::env::{make_env, EnvSpec, Environment};
use crate::error::{GawmError, Result};
use crate::logs::{episode_records, segment_records, MetricsRow, MetricsWriter, TrajectoryWriter};
use crate::policy::{compute_gae, normalize_advantages, ActionMode, Policy, PolicyBatch, PolicyLosses};
use crate::smoothing::{smooth_rewards, SmoothingConfig};
use crate::world_model::{LatentSampling, LatentState, LossComponents, SequenceBatch, WorldModel};

/// Who picks actions during collection.
#[derive(Clone, Copy)]
pub enum Behavior<'a> {
    Random,
    Policy(&'a Policy, ActionMode),
}

/// Rolls one episode to termination or the horizon and smooths its rewards.
pub fn collect_episode<R: Rng>(
    env: &mut dyn Environment,
    behavior: Behavior<'_>,
    smoothing: &SmoothingConfig,
    episode_id: u64,
    seed: u64,
    rng: &mut R,
) -> Result<EpisodeTrajectory> {
    let spec = env.spec().clone();
    let mut obs = env.reset();
    let mut observations = vec![obs.clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut continuations = Vec::new();
    let success;
    let mut memory = match behavior {
        Behavior::Policy(p, _) => Some(p.initial_state(1)),
        Behavior::Random => None,
    };
    loop {
        let joint = match (behavior, memory.as_mut()) {
            (Behavior::Policy(p, mode), Some(state)) => {
                let out = p.act(&obs, state, mode, rng)?;
                *state = out.state;
                out.actions
            }
            _ => (0..spec.n_agents).map(|_| rng.gen_range(0..spec.n_actions)).collect(),
        };
        let step = env.step(&joint)?;
        actions.push(joint);
        rewards.push(step.reward);
        continuations.push(step.continuation);
        obs = step.observations;
        observations.push(obs.clone());
        if step.continuation == 0.0 {
            success = step.info.success;
            break;
        }
    }
    let rewards_smoothed = smooth_rewards(&rewards, smoothing)?;
    let ep = EpisodeTrajectory {
        episode_id,
        observations,
        actions,
        rewards_raw: rewards,
        rewards_smoothed,
        continuations,
        meta: EpisodeMeta {
            seed,
            env: spec.name,
            success,
        },
    };
    ep.validate()?;
    Ok(ep)
}

/// `e_m` clipped gradient steps on freshly sampled windows. Windows are
/// `window_len` transitions long, or as long as the longest stored episode
/// if that is shorter.
pub fn train_world_model_phase<R: Rng>(
    model: &mut WorldModel,
    opt: &mut Adam,
    real: &RealBuffer,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<Vec<LossComponents>> {
    let longest = real
        .episodes()
        .map(EpisodeTrajectory::len)
        .max()
        .ok_or_else(|| GawmError::State("real buffer is empty".into()))?;
    let window = config.window_len.min(longest);
    (0..config.e_m)
        .map(|_| {
            let seq = real.sample_real_windows(config.wm_batch, window, rng.gen())?;
            model.train_step(opt, &seq, config.wm_grad_clip, rng)
        })
        .collect()
}

/// Seeds `count` imagined rollouts of up to `k` steps at uniformly drawn real
/// steps and pushes them to `pseudo`. Returns the number of segments added.
///
/// For a seed at step `t` of an episode the world model observes the real
/// prefix `0..=t` to obtain the posterior latent; the actor's memory is
/// warmed up on the model's reconstructions of that prefix. Imagination then
/// alternates `a ~ pi(. | o_hat)` with prior steps of the model. A sampled
/// continuation of 0 ends the segment early.
pub fn generate_imagination<R: Rng>(
    model: &WorldModel,
    policy: &Policy,
    real: &RealBuffer,
    pseudo: &mut PseudoBuffer,
    k: usize,
    count: usize,
    rng: &mut R,
) -> Result<usize> {
    if k == 0 || count == 0 {
        return Err(GawmError::Input("imagination needs k >= 1 and count >= 1".into()));
    }
    let seeds = real.sample_seed_steps(count, rng.gen())?;
    let n = model.n_agents;
    let episodes: Vec<&EpisodeTrajectory> = seeds
        .iter()
        .map(|&(e, _)| real.episode(e).expect("sampled index"))
        .collect();
    let horizon = seeds.iter().map(|&(_, t)| t).max().expect("count >= 1");

    // one padded batch over all prefixes; later steps never affect earlier ones
    let seq = SequenceBatch {
        batch: count,
        obs: (0..=horizon)
            .map(|j| stack(episodes.iter().map(|ep| &ep.observations[j.min(ep.len())])))
            .collect(),
        actions: (0..horizon)
            .map(|j| {
                episodes
                    .iter()
                    .flat_map(|ep| ep.actions[j.min(ep.len() - 1)].iter().copied())
                    .collect()
            })
            .collect(),
        rewards: vec![vec![0.0; count]; horizon],
        continuations: vec![vec![1.0; count]; horizon],
    };
    let steps = model.observe_sequence(&seq, LatentSampling::Sample, rng)?;

    let mut memory = policy.initial_state(count).memory;
    for (j, step) in steps.iter().enumerate().take(horizon) {
        let (_, next) = policy.action_logits(&step.reconstruction.obs_mean, &crate::policy::ActorState {
            memory: memory.clone(),
        })?;
        for (b, &(_, t)) in seeds.iter().enumerate() {
            if j < t {
                memory
                    .slice_mut(s![b * n..(b + 1) * n, ..])
                    .assign(&next.memory.slice(s![b * n..(b + 1) * n, ..]));
            }
        }
    }

    let mut latent = LatentState {
        h: gather(&seeds, n, |t| &steps[t].latent.h),
        z: gather(&seeds, n, |t| &steps[t].latent.z),
        z_logits: gather(&seeds, n, |t| &steps[t].latent.z_logits),
    };
    let mut obs = gather(&seeds, n, |t| &steps[t].reconstruction.obs_mean);
    let mut segments: Vec<PseudoSegment> = seeds
        .iter()
        .enumerate()
        .map(|(b, &(_, t))| PseudoSegment {
            observations: vec![obs.slice(s![b * n..(b + 1) * n, ..]).to_owned()],
            actions: Vec::new(),
            log_probs: Vec::new(),
            rewards: Vec::new(),
            continuations: Vec::new(),
            initial_memory: memory.slice(s![b * n..(b + 1) * n, ..]).to_owned(),
            origin: SegmentOrigin {
                episode_id: episodes[b].episode_id,
                t,
            },
        })
        .collect();
    let mut alive = vec![true; count];
    let mut state = crate::policy::ActorState { memory };
    for _ in 0..k {
        let out = policy.act(&obs, &state, ActionMode::Sample, rng)?;
        let (next, recon) = model.imagine_step(&latent, &out.actions, LatentSampling::Sample, rng)?;
        for (b, seg) in segments.iter_mut().enumerate() {
            let cont = if rng.gen::<f64>() < recon.continuation_prob[b] { 1.0 } else { 0.0 };
            if !alive[b] {
                continue;
            }
            seg.actions.push(out.actions[b * n..(b + 1) * n].to_vec());
            seg.log_probs.push(out.log_probs[b * n..(b + 1) * n].to_vec());
            seg.rewards.push(recon.reward_mean[b]);
            seg.continuations.push(cont);
            seg.observations
                .push(recon.obs_mean.slice(s![b * n..(b + 1) * n, ..]).to_owned());
            alive[b] = cont == 1.0;
        }
        if !alive.iter().any(|&a| a) {
            break;
        }
        latent = next;
        obs = recon.obs_mean;
        state = out.state;
    }
    let added = segments.len();
    for seg in segments {
        pseudo.push(seg)?;
    }
    Ok(added)
}

/// Rows of seed `b` taken from the tensor of its own step.
fn gather<'a>(seeds: &[(usize, usize)], n: usize, at: impl Fn(usize) -> &'a Tensor) -> Tensor {
    let parts: Vec<_> = seeds
        .iter()
        .enumerate()
        .map(|(b, &(_, t))| at(t).slice(s![b * n..(b + 1) * n, ..]))
        .collect();
    ndarray::concatenate(Axis(0), &parts).expect("equal widths")
}

fn stack<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let views: Vec<_> = parts.map(|t| t.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

/// Values from the critic, GAE per segment, advantages normalized over the
/// whole batch, then everything padded to the longest segment.
pub fn build_policy_batch(policy: &Policy, segments: &[&PseudoSegment]) -> Result<PolicyBatch> {
    if segments.is_empty() {
        return Err(GawmError::Input("no segments".into()));
    }
    let n = policy.n_agents;
    let all_obs = stack(segments.iter().flat_map(|s| s.observations.iter()));
    let values = policy.evaluate_value(&all_obs)?;
    let mut offset = 0;
    let mut advantages = Vec::with_capacity(segments.len());
    let mut returns = Vec::with_capacity(segments.len());
    for seg in segments {
        let l = seg.len();
        let v = &values[offset..offset + l + 1];
        offset += l + 1;
        let gae = compute_gae(
            &seg.rewards,
            &v[..l],
            v[l],
            &seg.continuations,
            policy.config.gamma,
            policy.config.gae_lambda,
        )?;
        advantages.push(gae.advantages);
        returns.push(gae.returns);
    }
    let flat: Vec<f64> = advantages.iter().flatten().copied().collect();
    let normalized = normalize_advantages(&flat);
    let mut cursor = 0;
    for a in advantages.iter_mut() {
        let l = a.len();
        a.copy_from_slice(&normalized[cursor..cursor + l]);
        cursor += l;
    }

    let b = segments.len();
    let longest = segments.iter().map(|s| s.len()).max().expect("non-empty");
    let obs_dim = policy.obs_dim;
    let mut batch = PolicyBatch {
        batch: b,
        initial_memory: stack(segments.iter().map(|s| &s.initial_memory)),
        obs: Vec::with_capacity(longest),
        actions: Vec::with_capacity(longest),
        old_log_probs: Vec::with_capacity(longest),
        advantages: Vec::with_capacity(longest),
        returns: Vec::with_capacity(longest),
        mask: Vec::with_capacity(longest),
    };
    for t in 0..longest {
        let mut obs = Array2::zeros((b * n, obs_dim));
        let mut actions = vec![0; b * n];
        let mut old = vec![0.0; b * n];
        let mut adv = vec![0.0; b];
        let mut ret = vec![0.0; b];
        let mut mask = vec![0.0; b];
        for (i, seg) in segments.iter().enumerate() {
            if t < seg.len() {
                obs.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&seg.observations[t]);
                actions[i * n..(i + 1) * n].copy_from_slice(&seg.actions[t]);
                old[i * n..(i + 1) * n].copy_from_slice(&seg.log_probs[t]);
                adv[i] = advantages[i][t];
                ret[i] = returns[i][t];
                mask[i] = 1.0;
            }
        }
        batch.obs.push(obs);
        batch.actions.push(actions);
        batch.old_log_probs.push(old);
        batch.advantages.push(adv);
        batch.returns.push(ret);
        batch.mask.push(mask);
    }
    Ok(batch)
}

/// `e_sample` PPO updates, each on a fresh draw of `policy_batch` segments.
pub fn train_policy_phase<R: Rng>(
    policy: &mut Policy,
    opt: &mut Adam,
    pseudo: &PseudoBuffer,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<Vec<PolicyLosses>> {
    (0..config.e_sample)
        .map(|_| {
            let segments = pseudo.sample(config.policy_batch, rng.gen())?;
            let batch = build_policy_batch(policy, &segments)?;
            policy.train_step(opt, &batch, config.policy_grad_clip)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub success_rate: f64,
    /// Population standard deviation of the per-episode success indicator.
    pub success_std: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

fn summarize(episodes: &[EpisodeTrajectory]) -> EvalResult {
    let n = episodes.len() as f64;
    let rate = episodes.iter().filter(|e| e.meta.success).count() as f64 / n;
    EvalResult {
        episodes: episodes.len(),
        success_rate: rate,
        success_std: (rate * (1.0 - rate)).sqrt(),
        mean_return: episodes.iter().map(|e| e.rewards_raw.iter().sum::<f64>()).sum::<f64>() / n,
        mean_length: episodes.iter().map(|e| e.len() as f64).sum::<f64>() / n,
    }
}

fn evaluate_with(env_name: &str, behavior: Behavior<'_>, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(GawmError::Input("evaluation needs at least one episode".into()));
    }
    let mut env = make_env(env_name, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let off = SmoothingConfig {
        enabled: false,
        ..SmoothingConfig::default()
    };
    let eps = (0..episodes)
        .map(|i| collect_episode(env.as_mut(), behavior, &off, i as u64, seed, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&eps))
}

/// Greedy evaluation on a fresh environment seeded with `seed`.
pub fn evaluate(policy: &Policy, env_name: &str, episodes: usize, seed: u64) -> Result<EvalResult> {
    evaluate_with(env_name, Behavior::Policy(policy, ActionMode::Greedy), episodes, seed)
}

/// The uniform-random team under the same harness as [`evaluate`].
pub fn evaluate_random(env_name: &str, episodes: usize, seed: u64) -> Result<EvalResult> {
    evaluate_with(env_name, Behavior::Random, episodes, seed)
}

/// Seed of the evaluation environment for a run seed.
pub fn eval_seed(run_seed: u64) -> u64 {
    run_seed ^ 0xe7a1_5eed_0000_0001
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer_episode: usize,
    pub env_steps: usize,
    pub episode_return: f64,
    pub episode_success: bool,
    /// Means over the world-model steps of this iteration.
    pub world_model: LossComponents,
    /// Means over the policy updates of this iteration.
    pub policy: PolicyLosses,
    pub eval_success_rate: Option<f64>,
    pub wall_clock_s: f64,
}

impl OuterRecord {
    pub fn metrics_row(&self) -> MetricsRow {
        MetricsRow {
            outer_episode: self.outer_episode,
            env_steps: self.env_steps,
            wm_obs_nll: self.world_model.obs_nll,
            wm_reward_nll: self.world_model.reward_nll,
            wm_discount_nll: self.world_model.discount_nll,
            wm_kl: self.world_model.kl,
            actor_loss: self.policy.actor,
            value_loss: self.policy.value,
            eval_success_rate: self.eval_success_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<OuterRecord>,
    pub final_eval: EvalResult,
    pub env_steps: usize,
    pub wall_clock_s: f64,
}

fn mean_losses(items: &[LossComponents]) -> LossComponents {
    let n = items.len().max(1) as f64;
    let mut m = LossComponents::default();
    for c in items {
        m.total += c.total / n;
        m.obs_nll += c.obs_nll / n;
        m.reward_nll += c.reward_nll / n;
        m.discount_nll += c.discount_nll / n;
        m.kl += c.kl / n;
        m.kl_raw += c.kl_raw / n;
        m.kl_per_categorical += c.kl_per_categorical / n;
    }
    m
}

fn mean_policy(items: &[PolicyLosses]) -> PolicyLosses {
    let n = items.len().max(1) as f64;
    let mut m = PolicyLosses::default();
    for c in items {
        m.total += c.total / n;
        m.actor += c.actor / n;
        m.value += c.value / n;
        m.entropy += c.entropy / n;
    }
    m
}

/// All mutable training state.
pub struct Trainer {
    pub config: RunConfig,
    pub spec: EnvSpec,
    pub world_model: WorldModel,
    pub policy: Policy,
    pub real: RealBuffer,
    pub pseudo: PseudoBuffer,
    pub env_steps: usize,
    pub outer_done: usize,
    env: Box<dyn Environment>,
    wm_opt: Adam,
    policy_opt: Adam,
    rng: ChaCha8Rng,
    next_episode_id: u64,
    trajectories: Option<TrajectoryWriter>,
    pseudo_logged: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = make_env(&config.env.name, rng.gen())?;
        let spec = env.spec().clone();
        let world_model = WorldModel::new(
            config.world_model.clone(),
            spec.n_agents,
            spec.obs_dim,
            spec.n_actions,
            rng.gen(),
        )?;
        let policy = Policy::new(config.policy.clone(), spec.n_agents, spec.obs_dim, spec.n_actions, rng.gen())?;
        Ok(Self {
            wm_opt: Adam::new(&world_model.params, config.trainer.wm_lr),
            policy_opt: Adam::new(&policy.params, config.trainer.policy_lr),
            real: RealBuffer::new(config.buffers.real_capacity)?,
            pseudo: PseudoBuffer::new(config.buffers.pseudo_capacity)?,
            config,
            spec,
            world_model,
            policy,
            env_steps: 0,
            outer_done: 0,
            env,
            rng,
            next_episode_id: 0,
            trajectories: None,
            pseudo_logged: 0,
        })
    }

    /// Logs every real episode (and imagined segments if configured) to
    /// `path` from now on.
    pub fn log_trajectories(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.trajectories = Some(TrajectoryWriter::create(path)?);
        Ok(())
    }

    fn collect(&mut self, random: bool) -> Result<EpisodeTrajectory> {
        let behavior = if random {
            Behavior::Random
        } else {
            Behavior::Policy(&self.policy, ActionMode::Sample)
        };
        let id = self.next_episode_id;
        let ep = collect_episode(
            self.env.as_mut(),
            behavior,
            &self.config.reward_smoothing,
            id,
            self.config.seed,
            &mut self.rng,
        )?;
        self.next_episode_id += 1;
        self.env_steps += ep.len();
        if let Some(w) = self.trajectories.as_mut() {
            w.write(&episode_records(&ep))?;
        }
        self.real.push(ep.clone())?;
        Ok(ep)
    }

    /// Random-policy episodes that seed the real buffer.
    pub fn warmup(&mut self) -> Result<()> {
        for _ in 0..self.config.trainer.warmup_episodes {
            self.collect(true)?;
        }
        Ok(())
    }

    /// One collect / model / imagine-and-improve cycle. Evaluation is left
    /// to the caller.
    pub fn outer_iteration(&mut self) -> Result<OuterRecord> {
        let start = Instant::now();
        if self.real.is_empty() {
            self.warmup()?;
        }
        let ep = self.collect(false)?;
        let tc = self.config.trainer.clone();
        let wm_losses =
            train_world_model_phase(&mut self.world_model, &mut self.wm_opt, &self.real, &tc, &mut self.rng)?;
        self.pseudo.clear();
        let mut policy_losses = Vec::new();
        for _ in 0..tc.e_pi {
            generate_imagination(
                &self.world_model,
                &self.policy,
                &self.real,
                &mut self.pseudo,
                tc.k,
                tc.imagination_count,
                &mut self.rng,
            )?;
            policy_losses.extend(train_policy_phase(
                &mut self.policy,
                &mut self.policy_opt,
                &self.pseudo,
                &tc,
                &mut self.rng,
            )?);
        }
        if self.config.logging.log_pseudo {
            if let Some(w) = self.trajectories.as_mut() {
                for seg in self.pseudo.segments() {
                    w.write(&segment_records(seg, self.pseudo_logged))?;
                    self.pseudo_logged += 1;
                }
            }
        }
        self.outer_done += 1;
        Ok(OuterRecord {
            outer_episode: self.outer_done - 1,
            env_steps: self.env_steps,
            episode_return: ep.rewards_raw.iter().sum(),
            episode_success: ep.meta.success,
            world_model: mean_losses(&wm_losses),
            policy: mean_policy(&policy_losses),
            eval_success_rate: None,
            wall_clock_s: start.elapsed().as_secs_f64(),
        })
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalResult> {
        evaluate(&self.policy, &self.config.env.name, episodes, eval_seed(self.config.seed))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            &self.world_model,
            &self.policy,
            self.outer_done,
            self.env_steps,
        )
    }

    pub fn budget_spent(&self) -> bool {
        let cap = self.config.trainer.max_env_steps;
        cap > 0 && self.env_steps >= cap
    }

    pub fn flush_logs(&mut self) -> Result<()> {
        match self.trajectories.as_mut() {
            Some(w) => w.flush(),
            None => Ok(()),
        }
    }
}

/// Runs the whole loop. With `out_dir`, writes the metrics CSV, the
/// trajectory log and checkpoints there (file names from `logging`).
pub fn run_training(config: &RunConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| GawmError::io(dir, e))?;
        let mpath = dir.join(&config.logging.metrics_file);
        if mpath.exists() {
            std::fs::remove_file(&mpath).map_err(|e| GawmError::io(&mpath, e))?;
        }
        metrics = Some(MetricsWriter::open(&mpath)?);
        trainer.log_trajectories(dir.join(&config.logging.trajectory_file))?;
    }
    let tc = config.trainer.clone();
    trainer.warmup()?;
    let mut records = Vec::new();
    let mut final_eval = None;
    for i in 0..tc.n_outer {
        let mut rec = trainer.outer_iteration()?;
        let last = i + 1 == tc.n_outer || trainer.budget_spent();
        if last || (tc.eval_every > 0 && (i + 1) % tc.eval_every == 0) {
            let ev = trainer.evaluate(tc.eval_episodes)?;
            rec.eval_success_rate = Some(ev.success_rate);
            if last {
                final_eval = Some(ev);
            }
        }
        if let Some(m) = metrics.as_mut() {
            m.write(&rec.metrics_row())?;
        }
        if let Some(dir) = out_dir {
            if tc.checkpoint_every > 0 && (i + 1) % tc.checkpoint_every == 0 {
                trainer
                    .checkpoint()
                    .save(dir.join(format!("checkpoint_{:05}.json", i + 1)))?;
            }
        }
        records.push(rec);
        if last {
            break;
        }
    }
    trainer.flush_logs()?;
    if let Some(dir) = out_dir {
        trainer.checkpoint().save(dir.join(&config.logging.checkpoint_file))?;
    }
    Ok(TrainReport {
        records,
        final_eval: final_eval.expect("the last iteration evaluates"),
        env_steps: trainer.env_steps,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::switch_corridor::{SwitchCorridor, SwitchCorridorConfig};

    pub(crate) fn smoke_config(env: &str) -> RunConfig {
        let mut c = RunConfig::default();
        c.env.name = env.into();
        c.seed = 4;
        let wm = &mut c.world_model;
        wm.h_dim = 8;
        wm.e_dim = 8;
        wm.g_dim = 8;
        wm.hidden = 8;
        wm.n_categoricals = 2;
        wm.n_classes = 4;
        c.policy.actor_hidden = 8;
        c.policy.critic_hidden = 8;
        c.policy.gru_dim = 8;
        let t = &mut c.trainer;
        t.n_outer = 2;
        t.e_m = 2;
        t.e_pi = 2;
        t.k = 3;
        t.e_sample = 2;
        t.warmup_episodes = 2;
        t.wm_batch = 2;
        t.window_len = 4;
        t.imagination_count = 4;
        t.policy_batch = 3;
        t.eval_episodes = 3;
        t.eval_every = 1;
        c
    }

    #[test]
    fn random_episode_respects_horizon() {
        let mut env = SwitchCorridor::new(SwitchCorridorConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in 0..50 {
            let ep = collect_episode(&mut env, Behavior::Random, &SmoothingConfig::default(), id, 1, &mut rng)
                .unwrap();
            assert!(ep.len() <= 8);
            ep.validate().unwrap();
        }
    }

    #[test]
    fn collection_is_deterministic() {
        let run = || {
            let mut env = SwitchCorridor::new(SwitchCorridorConfig::default(), 3).unwrap();
            let p = Policy::new(Default::default(), 2, 13, 3, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            collect_episode(
                &mut env,
                Behavior::Policy(&p, ActionMode::Sample),
                &SmoothingConfig::default(),
                0,
                3,
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn phases_report_one_record_per_step() {
        let c = smoke_config("switch_corridor");
        let mut t = Trainer::new(c.clone()).unwrap();
        t.warmup().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wm = train_world_model_phase(&mut t.world_model, &mut t.wm_opt, &t.real, &c.trainer, &mut rng).unwrap();
        assert_eq!(wm.len(), c.trainer.e_m);
        generate_imagination(&t.world_model, &t.policy, &t.real, &mut t.pseudo, 3, 5, &mut rng).unwrap();
        assert_eq!(t.pseudo.len(), 5);
        assert!(t.pseudo.segments().all(|s| s.len() >= 1 && s.len() <= 3));
        let pl = train_policy_phase(&mut t.policy, &mut t.policy_opt, &t.pseudo, &c.trainer, &mut rng).unwrap();
        assert_eq!(pl.len(), c.trainer.e_sample);
    }

    #[test]
    fn empty_buffers_are_state_errors() {
        let c = smoke_config("switch_corridor");
        let mut t = Trainer::new(c.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            train_world_model_phase(&mut t.world_model, &mut t.wm_opt, &t.real, &c.trainer, &mut rng),
            Err(GawmError::State(_))
        ));
        assert!(matches!(
            generate_imagination(&t.world_model, &t.policy, &t.real, &mut t.pseudo, 3, 2, &mut rng),
            Err(GawmError::State(_))
        ));
        assert!(matches!(
            train_policy_phase(&mut t.policy, &mut t.policy_opt, &t.pseudo, &c.trainer, &mut rng),
            Err(GawmError::State(_))
        ));
    }

    #[test]
    fn step_accounting_matches_episode_lengths() {
        let c = smoke_config("coop_capture");
        let mut t = Trainer::new(c).unwrap();
        t.warmup().unwrap();
        for _ in 0..2 {
            t.outer_iteration().unwrap();
        }
        assert_eq!(t.env_steps, t.real.total_transitions());
    }
}
