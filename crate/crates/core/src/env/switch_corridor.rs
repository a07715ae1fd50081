use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, zeros_obs, EnvSpec, Environment, StepInfo, StepResult};
use crate::autograd::Tensor;
use crate::error::{GawmError, Result};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const STAY: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchCorridorConfig {
    pub length: usize,
    pub max_episode_steps: usize,
}

impl Default for SwitchCorridorConfig {
    fn default() -> Self {
        Self {
            length: 5,
            max_episode_steps: 8,
        }
    }
}

/// Two agents in a corridor of `length` cells, both starting in the middle.
///
/// * A switch is drawn uniformly from {0, 1} at reset and never changes.
///   Only agent 0 observes it.
/// * Actions: left, right, stay (walls block).
/// * When agent 1 reaches either end the episode ends: +1 if that end
///   matches the switch (0 = left end, 1 = right end), -1 otherwise.
/// * All other steps give 0; the episode ends after `max_episode_steps`.
/// * Observation per agent: own cell one-hot, teammate cell one-hot, switch
///   one-hot (all zeros for agent 1), `step / max_episode_steps`.
///
/// Transitions are deterministic given the switch.
pub struct SwitchCorridor {
    config: SwitchCorridorConfig,
    spec: EnvSpec,
    rng: ChaCha8Rng,
    positions: [usize; 2],
    switch: usize,
    step: usize,
    done: bool,
}

impl SwitchCorridor {
    pub fn new(config: SwitchCorridorConfig, seed: u64) -> Result<Self> {
        if config.length < 3 || config.max_episode_steps == 0 {
            return Err(GawmError::Config(
                "switch_corridor needs length >= 3 and a positive horizon".into(),
            ));
        }
        let spec = EnvSpec {
            name: "switch_corridor".into(),
            n_agents: 2,
            obs_dim: 2 * config.length + 3,
            n_actions: 3,
            max_episode_steps: config.max_episode_steps,
            reward_range: (-1.0, 1.0),
        };
        let mut env = Self {
            config,
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            positions: [0, 0],
            switch: 0,
            step: 0,
            done: false,
        };
        env.reset();
        Ok(env)
    }

    pub fn switch(&self) -> usize {
        self.switch
    }

    pub fn positions(&self) -> [usize; 2] {
        self.positions
    }

    pub fn observe(&self) -> Tensor {
        let l = self.config.length;
        let mut obs = zeros_obs(&self.spec);
        for i in 0..2 {
            let mut row = obs.row_mut(i);
            row[self.positions[i]] = 1.0;
            row[l + self.positions[1 - i]] = 1.0;
            if i == 0 {
                row[2 * l + self.switch] = 1.0;
            }
            row[2 * l + 2] = self.step as f64 / self.config.max_episode_steps as f64;
        }
        obs
    }
}

impl Environment for SwitchCorridor {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Tensor {
        self.switch = self.rng.gen_range(0..2);
        let mid = self.config.length / 2;
        self.positions = [mid, mid];
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
        let last = self.config.length - 1;
        for (p, &a) in self.positions.iter_mut().zip(joint_action) {
            *p = match a {
                LEFT => p.saturating_sub(1),
                RIGHT => (*p + 1).min(last),
                _ => *p,
            };
        }
        self.step += 1;
        let runner = self.positions[1];
        let at_end = runner == 0 || runner == last;
        let correct_end = if self.switch == 0 { 0 } else { last };
        let success = at_end && runner == correct_end;
        let reward = match (at_end, success) {
            (true, true) => 1.0,
            (true, false) => -1.0,
            _ => 0.0,
        };
        let truncated = !at_end && self.step >= self.config.max_episode_steps;
        self.done = at_end || truncated;
        Ok(StepResult {
            observations: self.observe(),
            reward,
            continuation: if self.done { 0.0 } else { 1.0 },
            info: StepInfo { success, truncated },
        })
    }

    fn step_count(&self) -> usize {
        self.step
    }

    /// Both agents' cells in agent order followed by the clock.
    fn shared_state(&self, agent: usize, observation: ArrayView1<'_, f64>) -> Vec<f64> {
        let l = self.config.length;
        let own = observation.slice(ndarray::s![0..l]);
        let mate = observation.slice(ndarray::s![l..2 * l]);
        let (first, second) = if agent == 0 { (own, mate) } else { (mate, own) };
        first
            .iter()
            .chain(second.iter())
            .copied()
            .chain(std::iter::once(observation[2 * l + 2]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_agent_zero_sees_switch() {
        for seed in 0..20 {
            let mut e = SwitchCorridor::new(SwitchCorridorConfig::default(), seed).unwrap();
            let obs = e.reset();
            let l = 5;
            assert_eq!(obs[[0, 2 * l + e.switch()]], 1.0);
            assert_eq!(obs[[1, 2 * l]] + obs[[1, 2 * l + 1]], 0.0);
        }
    }

    #[test]
    fn correct_end_rewards() {
        let mut e = SwitchCorridor::new(SwitchCorridorConfig::default(), 3).unwrap();
        e.reset();
        let dir = if e.switch() == 0 { LEFT } else { RIGHT };
        assert_eq!(e.step(&[STAY, dir]).unwrap().reward, 0.0);
        let r = e.step(&[STAY, dir]).unwrap();
        assert_eq!(r.reward, 1.0);
        assert_eq!(r.continuation, 0.0);
        assert!(r.info.success);
    }

    #[test]
    fn wrong_end_penalized() {
        let mut e = SwitchCorridor::new(SwitchCorridorConfig::default(), 3).unwrap();
        e.reset();
        let dir = if e.switch() == 0 { RIGHT } else { LEFT };
        e.step(&[STAY, dir]).unwrap();
        let r = e.step(&[STAY, dir]).unwrap();
        assert_eq!(r.reward, -1.0);
        assert!(!r.info.success);
    }

    #[test]
    fn shared_state_agrees_between_agents() {
        let mut e = SwitchCorridor::new(SwitchCorridorConfig::default(), 1).unwrap();
        e.reset();
        let obs = e.step(&[LEFT, RIGHT]).unwrap().observations;
        assert_eq!(e.shared_state(0, obs.row(0)), e.shared_state(1, obs.row(1)));
    }

    #[test]
    fn episode_never_exceeds_horizon() {
        let mut e = SwitchCorridor::new(SwitchCorridorConfig::default(), 9).unwrap();
        e.reset();
        let mut n = 0;
        loop {
            n += 1;
            if e.step(&[STAY, STAY]).unwrap().continuation == 0.0 {
                break;
            }
        }
        assert_eq!(n, 8);
    }
}
