use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, zeros_obs, EnvSpec, Environment, StepInfo, StepResult};
use crate::autograd::Tensor;
use crate::error::{GawmError, Result};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const TAG: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct CoopCaptureConfig {
    pub n_agents: usize,
    pub grid: usize,
    pub max_episode_steps: usize,
    /// `(row, col)` of the stationary target.
    pub target: (usize, usize),
}

impl Default for CoopCaptureConfig {
    fn default() -> Self {
        Self {
            n_agents: 2,
            grid: 5,
            max_episode_steps: 25,
            target: (2, 2),
        }
    }
}

/// Grid capture game.
///
/// * Actions: up, down, left, right, stay, tag. Moves into a wall leave the
///   agent in place; several agents may share a cell.
/// * Start: every agent on a uniformly drawn cell other than the target.
/// * Success: every agent stands on the target and every agent picks `tag`
///   on the same step. Reward +1.0 and the episode ends.
/// * Otherwise reward -0.01 per step; the episode ends after
///   `max_episode_steps` steps.
/// * Observation per agent: one-hot of its own cell (`grid^2`), a 3x3 patch
///   centred on it with three channels (other agent present, target present,
///   outside the grid; `27` values), and `step / max_episode_steps`.
///
/// Sight radius is 1: teammates further away are invisible.
pub struct CoopCapture {
    config: CoopCaptureConfig,
    spec: EnvSpec,
    rng: ChaCha8Rng,
    positions: Vec<(usize, usize)>,
    step: usize,
    done: bool,
}

impl CoopCapture {
    pub fn new(config: CoopCaptureConfig, seed: u64) -> Result<Self> {
        let g = config.grid;
        if config.n_agents == 0 || g == 0 || config.max_episode_steps == 0 {
            return Err(GawmError::Config("coop_capture sizes must be >= 1".into()));
        }
        if config.target.0 >= g || config.target.1 >= g {
            return Err(GawmError::Config("coop_capture target outside grid".into()));
        }
        if g * g < 2 {
            return Err(GawmError::Config("coop_capture grid too small".into()));
        }
        let spec = EnvSpec {
            name: "coop_capture".into(),
            n_agents: config.n_agents,
            obs_dim: g * g + 27 + 1,
            n_actions: 6,
            max_episode_steps: config.max_episode_steps,
            reward_range: (-0.01, 1.0),
        };
        let mut env = Self {
            positions: vec![config.target; config.n_agents],
            config,
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            done: false,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &CoopCaptureConfig {
        &self.config
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// Places the agents explicitly and clears the terminal flag.
    pub fn set_state(&mut self, positions: Vec<(usize, usize)>, step: usize) -> Result<()> {
        if positions.len() != self.config.n_agents
            || positions
                .iter()
                .any(|&(r, c)| r >= self.config.grid || c >= self.config.grid)
            || step >= self.config.max_episode_steps
        {
            return Err(GawmError::Input("invalid coop_capture state".into()));
        }
        self.positions = positions;
        self.step = step;
        self.done = false;
        Ok(())
    }

    pub fn observe(&self) -> Tensor {
        let g = self.config.grid as isize;
        let mut obs = zeros_obs(&self.spec);
        let patch = (g * g) as usize;
        for (i, &(r, c)) in self.positions.iter().enumerate() {
            let mut row = obs.row_mut(i);
            row[r * self.config.grid + c] = 1.0;
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let cell = ((dr + 1) * 3 + (dc + 1)) as usize;
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= g || cc >= g {
                        row[patch + 18 + cell] = 1.0;
                        continue;
                    }
                    let here = (rr as usize, cc as usize);
                    let mate = self
                        .positions
                        .iter()
                        .enumerate()
                        .any(|(j, &p)| j != i && p == here);
                    if mate {
                        row[patch + cell] = 1.0;
                    }
                    if here == self.config.target {
                        row[patch + 9 + cell] = 1.0;
                    }
                }
            }
            row[patch + 27] = self.step as f64 / self.config.max_episode_steps as f64;
        }
        obs
    }

    fn moved(&self, (r, c): (usize, usize), action: usize) -> (usize, usize) {
        let last = self.config.grid - 1;
        match action {
            UP => (r.saturating_sub(1), c),
            DOWN => ((r + 1).min(last), c),
            LEFT => (r, c.saturating_sub(1)),
            RIGHT => (r, (c + 1).min(last)),
            _ => (r, c),
        }
    }
}

impl Environment for CoopCapture {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Tensor {
        let g = self.config.grid;
        let target = self.config.target;
        for i in 0..self.config.n_agents {
            self.positions[i] = loop {
                let p = (self.rng.gen_range(0..g), self.rng.gen_range(0..g));
                if p != target {
                    break p;
                }
            };
        }
        self.step = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(GawmError::Lifecycle(
                "step called on a finished episode; reset first".into(),
            ));
        }
        check_actions(&self.spec, joint_action)?;
        let target = self.config.target;
        let success = joint_action.iter().all(|&a| a == TAG)
            && self.positions.iter().all(|&p| p == target);
        for i in 0..self.positions.len() {
            self.positions[i] = self.moved(self.positions[i], joint_action[i]);
        }
        self.step += 1;
        let truncated = !success && self.step >= self.config.max_episode_steps;
        self.done = success || truncated;
        Ok(StepResult {
            observations: self.observe(),
            reward: if success { 1.0 } else { -0.01 },
            continuation: if self.done { 0.0 } else { 1.0 },
            info: StepInfo { success, truncated },
        })
    }

    fn step_count(&self) -> usize {
        self.step
    }

    /// The episode clock is the only environment-global feature an agent
    /// observes directly.
    fn shared_state(&self, _agent: usize, observation: ArrayView1<'_, f64>) -> Vec<f64> {
        vec![observation[self.spec.obs_dim - 1]]
    }
}
