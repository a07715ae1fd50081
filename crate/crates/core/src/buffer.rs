//! Real and pseudo trajectory buffers.
//!
//! Both are bounded FIFO queues. Real episodes feed world-model windows and
//! imagination seeds; pseudo segments produced by imagination feed the
//! policy.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{GawmError, Result};
use crate::world_model::SequenceBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub env: String,
    pub success: bool,
}

/// One real episode of `L` transitions. `observations[t]` is the joint
/// observation before `actions[t]`; `rewards_*[t]` and `continuations[t]`
/// describe the transition out of step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrajectory {
    pub episode_id: u64,
    pub observations: Vec<Tensor>,
    pub actions: Vec<Vec<usize>>,
    pub rewards_raw: Vec<f64>,
    pub rewards_smoothed: Vec<f64>,
    pub continuations: Vec<f64>,
    pub meta: EpisodeMeta,
}

impl EpisodeTrajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        if l == 0 {
            return Err(GawmError::Input("episode has no transitions".into()));
        }
        if self.observations.len() != l + 1
            || self.rewards_raw.len() != l
            || self.rewards_smoothed.len() != l
            || self.continuations.len() != l
        {
            return Err(GawmError::Input(format!(
                "episode {}: {} observations, {} actions, {}/{} rewards, {} continuations",
                self.episode_id,
                self.observations.len(),
                l,
                self.rewards_raw.len(),
                self.rewards_smoothed.len(),
                self.continuations.len()
            )));
        }
        let dim = self.observations[0].dim();
        if self.observations.iter().any(|o| o.dim() != dim) {
            return Err(GawmError::Input("observation shapes vary within the episode".into()));
        }
        if self.actions.iter().any(|a| a.len() != dim.0) {
            return Err(GawmError::Input("joint action size differs from agent count".into()));
        }
        check_continuations(&self.continuations)
    }
}

fn check_continuations(c: &[f64]) -> Result<()> {
    if c.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(GawmError::Input("continuations must be 0 or 1".into()));
    }
    if c[..c.len() - 1].contains(&0.0) {
        return Err(GawmError::Input("only the final transition may terminate".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOrigin {
    pub episode_id: u64,
    pub t: usize,
}

/// An imagined rollout. `observations[0]` is the reconstruction at the real
/// seed step; every further entry is imagined. `log_probs` and
/// `initial_memory` record the acting policy so PPO can form ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSegment {
    pub observations: Vec<Tensor>,
    pub actions: Vec<Vec<usize>>,
    pub log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub continuations: Vec<f64>,
    pub initial_memory: Tensor,
    pub origin: SegmentOrigin,
}

impl PseudoSegment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        if l == 0 {
            return Err(GawmError::Input("pseudo segment has no transitions".into()));
        }
        if self.observations.len() != l + 1
            || self.log_probs.len() != l
            || self.rewards.len() != l
            || self.continuations.len() != l
        {
            return Err(GawmError::Input("pseudo segment fields have inconsistent lengths".into()));
        }
        let rows = self.observations[0].nrows();
        if self.initial_memory.nrows() != rows
            || self.actions.iter().any(|a| a.len() != rows)
            || self.log_probs.iter().any(|p| p.len() != rows)
        {
            return Err(GawmError::Input("pseudo segment rows disagree with agent count".into()));
        }
        check_continuations(&self.continuations)
    }
}

/// Bounded queue that evicts the oldest item first.
#[derive(Clone, Debug)]
pub struct Fifo<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> Fifo<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(GawmError::Config("buffer capacity must be >= 1".into()));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity.min(1024)),
            capacity,
        })
    }

    /// Appends `item`, returning the evicted one if the queue was full.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(item);
        evicted
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }
}

/// A contiguous slice of `len` transitions of one stored episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub episode_id: u64,
    pub start: usize,
    pub observations: Vec<Tensor>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub continuations: Vec<f64>,
}

impl Window {
    fn cut(ep: &EpisodeTrajectory, start: usize, len: usize) -> Self {
        Self {
            episode_id: ep.episode_id,
            start,
            observations: ep.observations[start..=start + len].to_vec(),
            actions: ep.actions[start..start + len].to_vec(),
            rewards: ep.rewards_smoothed[start..start + len].to_vec(),
            continuations: ep.continuations[start..start + len].to_vec(),
        }
    }

    /// Stacks equal-length windows into a batch-major sequence; the rewards
    /// are the smoothed ones.
    pub fn stack(windows: &[Window]) -> Result<SequenceBatch> {
        let first = windows
            .first()
            .ok_or_else(|| GawmError::Input("no windows to stack".into()))?;
        let l = first.actions.len();
        if windows.iter().any(|w| w.actions.len() != l) {
            return Err(GawmError::Input("windows differ in length".into()));
        }
        let stack_obs = |t: usize| {
            let views: Vec<_> = windows.iter().map(|w| w.observations[t].view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("equal observation widths")
        };
        Ok(SequenceBatch {
            batch: windows.len(),
            obs: (0..=l).map(stack_obs).collect(),
            actions: (0..l)
                .map(|t| windows.iter().flat_map(|w| w.actions[t].iter().copied()).collect())
                .collect(),
            rewards: (0..l).map(|t| windows.iter().map(|w| w.rewards[t]).collect()).collect(),
            continuations: (0..l)
                .map(|t| windows.iter().map(|w| w.continuations[t]).collect())
                .collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RealBuffer {
    episodes: Fifo<EpisodeTrajectory>,
}

impl RealBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        Ok(Self {
            episodes: Fifo::new(capacity)?,
        })
    }

    pub fn push(&mut self, episode: EpisodeTrajectory) -> Result<()> {
        episode.validate()?;
        self.episodes.push(episode);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.episodes.capacity()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeTrajectory> {
        self.episodes.iter()
    }

    pub fn episode(&self, i: usize) -> Option<&EpisodeTrajectory> {
        self.episodes.get(i)
    }

    pub fn total_transitions(&self) -> usize {
        self.episodes.iter().map(EpisodeTrajectory::len).sum()
    }

    /// Draws `batch` windows of exactly `window_len` transitions uniformly
    /// over all valid `(episode, start)` pairs, with replacement.
    pub fn sample_windows(&self, batch: usize, window_len: usize, seed: u64) -> Result<Vec<Window>> {
        if window_len == 0 || batch == 0 {
            return Err(GawmError::Input("batch and window length must be >= 1".into()));
        }
        if self.is_empty() {
            return Err(GawmError::State("real buffer is empty".into()));
        }
        // cumulative count of valid starts per episode
        let mut cumulative = Vec::with_capacity(self.len());
        let mut total = 0;
        for ep in self.episodes.iter() {
            total += (ep.len() + 1).saturating_sub(window_len);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(GawmError::State(format!(
                "no stored episode has {window_len} transitions"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..batch)
            .map(|_| {
                let k = rng.gen_range(0..total);
                let e = cumulative.partition_point(|&c| c <= k);
                let before = if e == 0 { 0 } else { cumulative[e - 1] };
                Window::cut(self.episodes.get(e).expect("index"), k - before, window_len)
            })
            .collect())
    }

    pub fn sample_real_windows(&self, batch: usize, window_len: usize, seed: u64) -> Result<SequenceBatch> {
        Window::stack(&self.sample_windows(batch, window_len, seed)?)
    }

    /// Uniform `(episode index, step)` pairs over every stored observation
    /// that has an action, i.e. every step an imagined rollout can start at.
    pub fn sample_seed_steps(&self, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
        let total = self.total_transitions();
        if total == 0 {
            return Err(GawmError::State("real buffer is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens: Vec<usize> = self.episodes.iter().map(EpisodeTrajectory::len).collect();
        Ok((0..count)
            .map(|_| {
                let mut k = rng.gen_range(0..total);
                let mut e = 0;
                while k >= lens[e] {
                    k -= lens[e];
                    e += 1;
                }
                (e, k)
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct PseudoBuffer {
    segments: Fifo<PseudoSegment>,
}

impl PseudoBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        Ok(Self {
            segments: Fifo::new(capacity)?,
        })
    }

    pub fn push(&mut self, segment: PseudoSegment) -> Result<()> {
        segment.validate()?;
        self.segments.push(segment);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.segments.capacity()
    }

    pub fn clear(&mut self) {
        self.segments.clear();
    }

    pub fn segments(&self) -> impl Iterator<Item = &PseudoSegment> {
        self.segments.iter()
    }

    /// Uniform draws with replacement.
    pub fn sample(&self, batch: usize, seed: u64) -> Result<Vec<&PseudoSegment>> {
        if self.is_empty() {
            return Err(GawmError::State("pseudo buffer is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..batch)
            .map(|_| self.segments.get(rng.gen_range(0..self.len())).expect("index"))
            .collect())
    }
}
