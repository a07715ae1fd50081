//! Seedable cooperative Dec-POMDPs.
//!
//! Two environments are registered:
//!
//! * `coop_capture`: agents on a grid must stand on a stationary target and
//!   choose `tag` on the same step. Each agent sees its own position, a 3x3
//!   patch around itself and the episode clock.
//! * `switch_corridor`: a 1-D corridor where only agent 0 can see a hidden
//!   switch that decides which end agent 1 must reach.
//!
//! Rules are documented on each type and in `docs/environments.md`.

pub mod coop_capture;
pub mod switch_corridor;

use ndarray::{Array2, ArrayView1};

pub use coop_capture::{CoopCapture, CoopCaptureConfig};
pub use switch_corridor::{SwitchCorridor, SwitchCorridorConfig};

use crate::autograd::Tensor;
use crate::error::{GawmError, Result};

/// Static description of an environment instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub max_episode_steps: usize,
    /// Inclusive bounds on any single-step team reward.
    pub reward_range: (f64, f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub success: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    /// `(n_agents x obs_dim)`, every entry in `[0, 1]`.
    pub observations: Tensor,
    pub reward: f64,
    /// 1 while the episode continues, 0 on the terminal transition.
    pub continuation: f64,
    pub info: StepInfo,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    fn reset(&mut self) -> Tensor;

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult>;

    /// Steps taken since the last reset.
    fn step_count(&self) -> usize;

    /// Agent `agent`'s estimate of the environment-global features, read off
    /// one of its observation rows (real or reconstructed).
    fn shared_state(&self, agent: usize, observation: ArrayView1<'_, f64>) -> Vec<f64>;
}

pub const ENV_NAMES: &[&str] = &["coop_capture", "switch_corridor"];

/// Builds a registered environment with its default layout.
pub fn make_env(name: &str, seed: u64) -> Result<Box<dyn Environment>> {
    match name {
        "coop_capture" => Ok(Box::new(CoopCapture::new(CoopCaptureConfig::default(), seed)?)),
        "switch_corridor" => Ok(Box::new(SwitchCorridor::new(
            SwitchCorridorConfig::default(),
            seed,
        )?)),
        other => Err(GawmError::Config(format!(
            "unknown environment {other:?}; registered: {}",
            ENV_NAMES.join(", ")
        ))),
    }
}

/// Spec of a registered environment without building a handle.
pub fn env_spec(name: &str) -> Result<EnvSpec> {
    make_env(name, 0).map(|e| e.spec().clone())
}

pub(crate) fn check_actions(spec: &EnvSpec, joint_action: &[usize]) -> Result<()> {
    if joint_action.len() != spec.n_agents {
        return Err(GawmError::Input(format!(
            "expected {} actions, got {}",
            spec.n_agents,
            joint_action.len()
        )));
    }
    if let Some((i, a)) = joint_action
        .iter()
        .enumerate()
        .find(|(_, &a)| a >= spec.n_actions)
    {
        return Err(GawmError::Input(format!(
            "action {a} of agent {i} outside [0, {})",
            spec.n_actions
        )));
    }
    Ok(())
}

pub(crate) fn zeros_obs(spec: &EnvSpec) -> Tensor {
    Array2::zeros((spec.n_agents, spec.obs_dim))
}
