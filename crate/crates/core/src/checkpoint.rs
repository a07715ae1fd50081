//! Versioned JSON checkpoints holding the run configuration and every
//! parameter tensor by name.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::env::env_spec;
use crate::error::{GawmError, Result};
use crate::policy::Policy;
use crate::world_model::WorldModel;

pub const FORMAT: &str = "gawm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub outer_episode: usize,
    pub env_steps: usize,
    pub world_model: Vec<NamedTensor>,
    pub policy: Vec<NamedTensor>,
    pub behavior: Vec<NamedTensor>,
}

fn dump(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            shape: [t.nrows(), t.ncols()],
            data: t.iter().copied().collect(),
        })
        .collect()
}

fn restore(store: &mut ParamStore, saved: &[NamedTensor], what: &str) -> Result<()> {
    if saved.len() != store.len() {
        return Err(GawmError::Incompatible(format!(
            "{what}: checkpoint has {} tensors, the configured model has {}",
            saved.len(),
            store.len()
        )));
    }
    for nt in saved {
        let id = store.id(&nt.name).ok_or_else(|| {
            GawmError::Incompatible(format!("{what}: unknown tensor {:?}", nt.name))
        })?;
        let target = store.get_mut(id);
        if target.dim() != (nt.shape[0], nt.shape[1]) || nt.data.len() != nt.shape[0] * nt.shape[1] {
            return Err(GawmError::Incompatible(format!(
                "{what}: tensor {:?} is {:?} in the checkpoint but {:?} in the model",
                nt.name,
                nt.shape,
                target.dim()
            )));
        }
        *target = Array2::from_shape_vec((nt.shape[0], nt.shape[1]), nt.data.clone())
            .expect("shape checked");
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        world_model: &WorldModel,
        policy: &Policy,
        outer_episode: usize,
        env_steps: usize,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: config.clone(),
            outer_episode,
            env_steps,
            world_model: dump(&world_model.params),
            policy: dump(&policy.params),
            behavior: dump(&policy.behavior),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| GawmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GawmError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| GawmError::Format(format!("{}: {e}", path.display())))?;
        let format = value.get("format").and_then(|f| f.as_str());
        let version = value.get("version").and_then(|v| v.as_u64());
        if format != Some(FORMAT) || version != Some(VERSION as u64) {
            return Err(GawmError::Incompatible(format!(
                "{}: expected {FORMAT} version {VERSION}, found {format:?} version {version:?}",
                path.display()
            )));
        }
        serde_json::from_value(value)
            .map_err(|e| GawmError::Incompatible(format!("{}: {e}", path.display())))
    }

    /// Rebuilds both models from the stored configuration and parameters.
    pub fn instantiate(&self) -> Result<(WorldModel, Policy)> {
        self.config
            .validate()
            .map_err(|e| GawmError::Incompatible(format!("stored configuration: {e}")))?;
        let spec = env_spec(&self.config.env.name)?;
        let mut wm = WorldModel::new(
            self.config.world_model.clone(),
            spec.n_agents,
            spec.obs_dim,
            spec.n_actions,
            0,
        )?;
        let mut policy = Policy::new(
            self.config.policy.clone(),
            spec.n_agents,
            spec.obs_dim,
            spec.n_actions,
            0,
        )?;
        restore(&mut wm.params, &self.world_model, "world model")?;
        restore(&mut policy.params, &self.policy, "policy")?;
        restore(&mut policy.behavior, &self.behavior, "behavior policy")?;
        Ok((wm, policy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.env.name = "switch_corridor".into();
        c.world_model.h_dim = 8;
        c.world_model.e_dim = 8;
        c.world_model.g_dim = 8;
        c.world_model.hidden = 8;
        c.world_model.n_categoricals = 2;
        c.world_model.n_classes = 3;
        c.policy.actor_hidden = 4;
        c.policy.critic_hidden = 4;
        c.policy.gru_dim = 4;
        c
    }

    fn models(c: &RunConfig, seed: u64) -> (WorldModel, Policy) {
        let spec = env_spec(&c.env.name).unwrap();
        (
            WorldModel::new(c.world_model.clone(), spec.n_agents, spec.obs_dim, spec.n_actions, seed).unwrap(),
            Policy::new(c.policy.clone(), spec.n_agents, spec.obs_dim, spec.n_actions, seed).unwrap(),
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let c = tiny_config();
        let (wm, p) = models(&c, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        Checkpoint::capture(&c, &wm, &p, 3, 77).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.env_steps, 77);
        let (wm2, p2) = ck.instantiate().unwrap();
        for ((_, a), (_, b)) in wm.params.iter().zip(wm2.params.iter()) {
            assert_eq!(a, b);
        }
        for ((_, a), (_, b)) in p.behavior.iter().zip(p2.behavior.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mismatches_are_incompatible() {
        let c = tiny_config();
        let (wm, p) = models(&c, 5);
        let mut ck = Checkpoint::capture(&c, &wm, &p, 0, 0);
        ck.config.world_model.hidden = 16;
        assert!(matches!(ck.instantiate(), Err(GawmError::Incompatible(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut ck = Checkpoint::capture(&c, &wm, &p, 0, 0);
        ck.version = 99;
        ck.save(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        std::fs::write(&path, "{\"hello\": 1}").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(GawmError::Incompatible(_))));
    }
}
