//! Run configuration: a TOML document plus dotted `key=value` overrides.
//!
//! ```toml
//! seed = 3
//!
//! [env]
//! name = "switch_corridor"
//!
//! [trainer]
//! n_outer = 50
//! k = 8
//!
//! [world_model]
//! hidden = 32
//! ```
//!
//! Every section and key is optional; omitted values take their defaults.
//! Unknown keys are rejected with the offending field named.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GawmError, Result};
use crate::policy::PolicyConfig;
use crate::smoothing::SmoothingConfig;
use crate::world_model::WorldModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub name: String,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: "coop_capture".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    pub real_capacity: usize,
    pub pseudo_capacity: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            real_capacity: 500,
            pseudo_capacity: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Outer iterations, one real episode each.
    pub n_outer: usize,
    /// World-model gradient steps per outer iteration.
    pub e_m: usize,
    /// Imagination/policy phases per outer iteration.
    pub e_pi: usize,
    /// Imagination horizon.
    pub k: usize,
    /// Policy gradient steps per phase.
    pub e_sample: usize,
    pub warmup_episodes: usize,
    /// Windows per world-model step.
    pub wm_batch: usize,
    /// Transitions per window; capped by the longest stored episode.
    pub window_len: usize,
    /// Imagined segments generated per phase.
    pub imagination_count: usize,
    /// Segments per policy step.
    pub policy_batch: usize,
    pub wm_lr: f64,
    pub policy_lr: f64,
    pub wm_grad_clip: f64,
    pub policy_grad_clip: f64,
    /// Stop once this many real steps have been taken; 0 disables the cap.
    pub max_env_steps: usize,
    /// Evaluate every this many outer iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Write a checkpoint every this many outer iterations; 0 only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            n_outer: 100,
            e_m: 40,
            e_pi: 4,
            k: 8,
            e_sample: 4,
            warmup_episodes: 5,
            wm_batch: 16,
            window_len: 16,
            imagination_count: 32,
            policy_batch: 16,
            wm_lr: 3e-4,
            policy_lr: 3e-4,
            wm_grad_clip: 10.0,
            policy_grad_clip: 10.0,
            max_env_steps: 0,
            eval_every: 10,
            eval_episodes: 20,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoggingConfig {
    pub metrics_file: String,
    pub trajectory_file: String,
    pub checkpoint_file: String,
    /// Also log imagined segments to the trajectory file.
    pub log_pseudo: bool,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            metrics_file: "metrics.csv".into(),
            trajectory_file: "trajectories.jsonl".into(),
            checkpoint_file: "checkpoint.json".into(),
            log_pseudo: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub world_model: WorldModelConfig,
    pub policy: PolicyConfig,
    pub reward_smoothing: SmoothingConfig,
    pub buffers: BufferConfig,
    pub trainer: TrainerConfig,
    pub logging: LoggingConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        crate::env::env_spec(&self.env.name)?;
        self.world_model.validate()?;
        self.policy.validate()?;
        self.reward_smoothing.validate()?;
        let t = &self.trainer;
        let counts = [
            ("trainer.n_outer", t.n_outer),
            ("trainer.e_m", t.e_m),
            ("trainer.e_pi", t.e_pi),
            ("trainer.k", t.k),
            ("trainer.e_sample", t.e_sample),
            ("trainer.wm_batch", t.wm_batch),
            ("trainer.window_len", t.window_len),
            ("trainer.imagination_count", t.imagination_count),
            ("trainer.policy_batch", t.policy_batch),
            ("trainer.eval_episodes", t.eval_episodes),
            ("trainer.warmup_episodes", t.warmup_episodes),
            ("buffers.real_capacity", self.buffers.real_capacity),
            ("buffers.pseudo_capacity", self.buffers.pseudo_capacity),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(GawmError::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("trainer.wm_lr", t.wm_lr),
            ("trainer.policy_lr", t.policy_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GawmError::Config(format!("{name} must be a non-negative number")));
            }
        }
        for (name, v) in [
            ("trainer.wm_grad_clip", t.wm_grad_clip),
            ("trainer.policy_grad_clip", t.policy_grad_clip),
        ] {
            if !(v > 0.0) {
                return Err(GawmError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Parses and validates a TOML document with overrides applied.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| GawmError::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| GawmError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GawmError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
            .map_err(|e| match e {
                GawmError::Config(msg) => GawmError::Config(format!("{}: {msg}", path.display())),
                other => other,
            })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| GawmError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(GawmError::Config(format!("override key {key:?} is malformed")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| GawmError::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.trainer.e_m, 40);
        assert_eq!(c.trainer.k, 8);
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "[trainer]\nk = 6\n";
        let c = RunConfig::from_toml_str(
            text,
            &[
                "trainer.k=4".into(),
                "env.name=switch_corridor".into(),
                "reward_smoothing.H=0".into(),
                "world_model.beta=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.trainer.k, 4);
        assert_eq!(c.env.name, "switch_corridor");
        assert_eq!(c.reward_smoothing.half_window, 0);
        assert_eq!(c.world_model.beta, 0.5);
        let round = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_toml_str("[trainer]\nkk = 3\n", &[]).unwrap_err();
        assert!(matches!(err, GawmError::Config(ref m) if m.contains("kk")), "{err}");
        let err = RunConfig::from_toml_str("", &["trainer.k=0".into()]).unwrap_err();
        assert!(err.to_string().contains("trainer.k"));
        let err = RunConfig::from_toml_str("", &["env.name=chess".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(RunConfig::from_toml_str("", &["novalue".into()]).is_err());
        assert!(RunConfig::from_toml_str("seed = [", &[]).is_err());
    }
}
