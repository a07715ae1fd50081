//! Gaussian temporal smoothing of team rewards.
//!
//! Each reward is replaced by a normalized Gaussian-weighted average of its
//! neighbours within `H` steps, with indices clipped to the episode. Because
//! the kernel sums to one, the total reward of an episode is preserved
//! exactly whenever its first `H` and last `H` rewards are zero; near the
//! boundaries clipping re-weights edge rewards, so totals can drift when
//! rewards sit within `H` steps of either end.

use serde::{Deserialize, Serialize};

use crate::error::{GawmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    /// Half-window.
    #[serde(rename = "H")]
    pub half_window: usize,
    pub sigma: f64,
    pub enabled: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            half_window: 2,
            sigma: 1.0,
            enabled: true,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(GawmError::Config(format!(
                "reward_smoothing.sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Weights for offsets `-H..=H`, normalized to sum to one.
pub fn smoothing_kernel(half_window: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(GawmError::Input(format!("sigma must be positive, got {sigma}")));
    }
    let h = half_window as i64;
    let raw: Vec<f64> = (-h..=h)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Smooths one episode's rewards. The output has the input's length and is
/// the input itself when smoothing is disabled or `H = 0`.
pub fn smooth_rewards(rewards: &[f64], config: &SmoothingConfig) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(GawmError::Input("cannot smooth an empty reward sequence".into()));
    }
    config.validate()?;
    if !config.enabled || config.half_window == 0 {
        return Ok(rewards.to_vec());
    }
    let kernel = smoothing_kernel(config.half_window, config.sigma)?;
    let h = config.half_window as i64;
    let last = rewards.len() as i64 - 1;
    Ok((0..=last)
        .map(|t| {
            kernel
                .iter()
                .zip(-h..=h)
                .map(|(w, i)| w * rewards[(t + i).clamp(0, last) as usize])
                .sum()
        })
        .collect())
}
