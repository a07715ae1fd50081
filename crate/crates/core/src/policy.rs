//! Multi-agent PPO with decentralized recurrent actors and a centralized
//! critic.
//!
//! The actor is shared by all agents. Agent `i` sees `[o_i, onehot(i)]`,
//! passes it through a ReLU layer and a GRU, and reads action logits off the
//! GRU state; nothing in that path mixes rows, so an agent's action never
//! depends on a teammate's observation. The critic is an MLP over the
//! concatenation of every agent's observation.
//!
//! Two parameter copies are kept: `params` is what the optimizer updates and
//! `behavior` is what acts. After each update `behavior` is blended towards
//! `params` with `target_update_tau` (1.0, the default, copies it).

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_blocks, Adam, Gradients, Graph, ParamStore, Tensor, Var};
use crate::error::{GawmError, Result};
use crate::nn::{GruCell, Linear, Mlp};
use crate::world_model::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub clip_epsilon: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub gru_dim: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub target_update_tau: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            actor_hidden: 64,
            critic_hidden: 64,
            gru_dim: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            target_update_tau: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GawmError::Config(format!("policy.{msg}")));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.actor_hidden == 0 || self.critic_hidden == 0 || self.gru_dim == 0 {
            return bad("layer widths must be positive");
        }
        if !(self.entropy_coef >= 0.0) {
            return bad("entropy_coef must be non-negative");
        }
        if !(self.value_coef > 0.0) {
            return bad("value_coef must be positive");
        }
        if !(self.target_update_tau > 0.0 && self.target_update_tau <= 1.0) {
            return bad("target_update_tau must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Recurrent memory of the actor, one row per agent (per batch element).
#[derive(Clone, Debug, PartialEq)]
pub struct ActorState {
    pub memory: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub state: ActorState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Time-major training batch for one PPO update. Per-step vectors hold one
/// entry per agent row (`b * n_agents + i`) or per batch element, as noted.
/// Steps with `mask = 0` are padding and do not enter any loss.
#[derive(Clone, Debug)]
pub struct PolicyBatch {
    pub batch: usize,
    pub initial_memory: Tensor,
    pub obs: Vec<Tensor>,
    /// Per agent row.
    pub actions: Vec<Vec<usize>>,
    /// Per agent row.
    pub old_log_probs: Vec<Vec<f64>>,
    /// Per batch element.
    pub advantages: Vec<Vec<f64>>,
    /// Per batch element.
    pub returns: Vec<Vec<f64>>,
    /// Per batch element.
    pub mask: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyLosses {
    pub total: f64,
    pub actor: f64,
    pub value: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct PolicyLossVars {
    pub total: Var,
    pub actor: Var,
    pub value: Var,
    pub entropy: Var,
}

pub struct Policy {
    pub config: PolicyConfig,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub params: ParamStore,
    pub behavior: ParamStore,
    actor_in: Linear,
    actor_gru: GruCell,
    actor_out: Linear,
    critic: Mlp,
}

impl Policy {
    pub fn new(
        config: PolicyConfig,
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if n_agents == 0 || obs_dim == 0 || n_actions == 0 {
            return Err(GawmError::Config("agent, observation and action counts must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let actor_in = Linear::new(&mut store, "actor.in", obs_dim + n_agents, c.actor_hidden, &mut rng);
        let actor_gru = GruCell::new(&mut store, "actor.gru", c.actor_hidden, c.gru_dim, &mut rng);
        let actor_out = Linear::new(&mut store, "actor.out", c.gru_dim, n_actions, &mut rng);
        actor_out.scale_weights(&mut store, 0.01);
        let critic = Mlp::new(
            &mut store,
            "critic",
            &[n_agents * obs_dim, c.critic_hidden, c.critic_hidden, 1],
            &mut rng,
        );
        Ok(Self {
            config,
            n_agents,
            obs_dim,
            n_actions,
            behavior: store.clone(),
            params: store,
            actor_in,
            actor_gru,
            actor_out,
            critic,
        })
    }

    pub fn initial_state(&self, batch: usize) -> ActorState {
        ActorState {
            memory: Array2::zeros((batch * self.n_agents, self.config.gru_dim)),
        }
    }

    /// Output layer of the critic, e.g. for zeroing in probes.
    pub fn critic_head(&self) -> &Linear {
        self.critic.last()
    }

    fn rows_check(&self, obs: &Tensor, memory: &Tensor) -> Result<usize> {
        if obs.ncols() != self.obs_dim || obs.nrows() == 0 || obs.nrows() % self.n_agents != 0 {
            return Err(GawmError::Shape(format!(
                "observations are {:?}, expected (k * {}) x {}",
                obs.dim(),
                self.n_agents,
                self.obs_dim
            )));
        }
        if memory.dim() != (obs.nrows(), self.config.gru_dim) {
            return Err(GawmError::Shape(format!(
                "actor memory is {:?}, expected {:?}",
                memory.dim(),
                (obs.nrows(), self.config.gru_dim)
            )));
        }
        Ok(obs.nrows() / self.n_agents)
    }

    fn identity(&self, batch: usize) -> Tensor {
        Array2::from_shape_fn((batch * self.n_agents, self.n_agents), |(r, c)| {
            if r % self.n_agents == c {
                1.0
            } else {
                0.0
            }
        })
    }

    /// `(logits, next_memory)` for a block of agent rows.
    pub fn actor_step_var(&self, g: &mut Graph<'_>, obs: Var, memory: Var) -> (Var, Var) {
        let rows = g.value(obs).nrows();
        let id = g.constant(self.identity(rows / self.n_agents));
        let x = g.concat_cols(&[obs, id]);
        let x = self.actor_in.forward(g, x);
        let x = g.relu(x);
        let memory = self.actor_gru.forward(g, x, memory);
        (self.actor_out.forward(g, memory), memory)
    }

    /// `(batch x 1)` values from `(batch * n_agents x obs_dim)` observations.
    pub fn value_var(&self, g: &mut Graph<'_>, joint_obs: Var) -> Var {
        let rows = g.value(joint_obs).nrows();
        let joint = g.reshape(joint_obs, rows / self.n_agents, self.n_agents * self.obs_dim);
        self.critic.forward(g, joint)
    }

    /// Action logits under the behavior parameters.
    pub fn action_logits(&self, obs: &Tensor, state: &ActorState) -> Result<(Tensor, ActorState)> {
        self.rows_check(obs, &state.memory)?;
        let mut g = Graph::new(&self.behavior);
        let o = g.constant(obs.clone());
        let m = g.constant(state.memory.clone());
        let (logits, memory) = self.actor_step_var(&mut g, o, m);
        Ok((
            g.value(logits).clone(),
            ActorState {
                memory: g.value(memory).clone(),
            },
        ))
    }

    /// Picks one action per agent row from local inputs only.
    pub fn act<R: Rng>(
        &self,
        obs: &Tensor,
        state: &ActorState,
        mode: ActionMode,
        rng: &mut R,
    ) -> Result<ActOutput> {
        if obs.iter().any(|x| !x.is_finite()) {
            return Err(GawmError::Numeric("non-finite observation given to the actor".into()));
        }
        let (logits, state) = self.action_logits(obs, state)?;
        let log_p = log_softmax_blocks(&logits, self.n_actions);
        let mut actions = Vec::with_capacity(log_p.nrows());
        let mut log_probs = Vec::with_capacity(log_p.nrows());
        for row in log_p.rows() {
            let a = match mode {
                ActionMode::Greedy => argmax(row.iter().copied()),
                ActionMode::Sample => WeightedIndex::new(row.iter().map(|l| l.exp()))
                    .map_err(|e| GawmError::Numeric(format!("actor distribution: {e}")))?
                    .sample(rng),
            };
            actions.push(a);
            log_probs.push(row[a]);
        }
        Ok(ActOutput {
            actions,
            log_probs,
            state,
        })
    }

    /// Critic values (learner parameters), one per group of agent rows.
    pub fn evaluate_value(&self, joint_obs: &Tensor) -> Result<Vec<f64>> {
        if joint_obs.ncols() != self.obs_dim || joint_obs.nrows() == 0 || joint_obs.nrows() % self.n_agents != 0 {
            return Err(GawmError::Shape(format!(
                "joint observations are {:?}, expected (k * {}) x {}",
                joint_obs.dim(),
                self.n_agents,
                self.obs_dim
            )));
        }
        let mut g = Graph::new(&self.params);
        let o = g.constant(joint_obs.clone());
        let v = self.value_var(&mut g, o);
        Ok(g.value(v).iter().copied().collect())
    }

    pub fn validate_batch(&self, b: &PolicyBatch) -> Result<()> {
        let rows = b.batch * self.n_agents;
        let l = b.obs.len();
        if b.batch == 0 || l == 0 {
            return Err(GawmError::Input("empty policy batch".into()));
        }
        if b.initial_memory.dim() != (rows, self.config.gru_dim) {
            return Err(GawmError::Shape("initial memory does not match the batch".into()));
        }
        let lens = [b.actions.len(), b.old_log_probs.len(), b.advantages.len(), b.returns.len(), b.mask.len()];
        if lens.iter().any(|&x| x != l) {
            return Err(GawmError::Input("policy batch fields have different lengths".into()));
        }
        for t in 0..l {
            if b.obs[t].dim() != (rows, self.obs_dim)
                || b.actions[t].len() != rows
                || b.old_log_probs[t].len() != rows
                || b.advantages[t].len() != b.batch
                || b.returns[t].len() != b.batch
                || b.mask[t].len() != b.batch
            {
                return Err(GawmError::Shape(format!("policy batch step {t} is misshapen")));
            }
            if b.actions[t].iter().any(|&a| a >= self.n_actions) {
                return Err(GawmError::Input("action out of range".into()));
            }
        }
        if b.mask.iter().flatten().all(|&m| m == 0.0) {
            return Err(GawmError::Input("policy batch has no valid step".into()));
        }
        Ok(())
    }

    /// `actor - entropy_coef * entropy + value_coef * value`. The actor term
    /// is the negated mean clipped surrogate over valid agent-steps, the value
    /// term the mean squared error over valid steps.
    pub fn loss_graph(&self, g: &mut Graph<'_>, b: &PolicyBatch) -> PolicyLossVars {
        let n = self.n_agents;
        let eps = self.config.clip_epsilon;
        let mut memory = g.constant(b.initial_memory.clone());
        let mut surr_terms = Vec::new();
        let mut ent_terms = Vec::new();
        let mut val_terms = Vec::new();
        let mut steps = 0.0;
        for t in 0..b.obs.len() {
            steps += b.mask[t].iter().sum::<f64>();
            let obs = g.constant(b.obs[t].clone());
            let (logits, next) = self.actor_step_var(g, obs, memory);
            memory = next;
            let lp = g.log_softmax_blocks(logits, self.n_actions);
            let new_lp = g.pick_cols(lp, &b.actions[t]);
            let old = g.constant(column(&b.old_log_probs[t]));
            let log_ratio = g.sub(new_lp, old);
            let ratio = g.exp(log_ratio);
            let adv = g.constant(column(&per_row(&b.advantages[t], n)));
            let mask_rows = g.constant(column(&per_row(&b.mask[t], n)));
            let s1 = g.mul(ratio, adv);
            let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let s2 = g.mul(clipped, adv);
            let surr = g.min(s1, s2);
            let surr = g.mul(surr, mask_rows);
            surr_terms.push(g.sum(surr));

            let p = g.exp(lp);
            let plp = g.mul(p, lp);
            let neg_ent = g.row_sum(plp);
            let neg_ent = g.mul(neg_ent, mask_rows);
            ent_terms.push(g.sum(neg_ent));

            let v = self.value_var(g, obs);
            let ret = g.constant(column(&b.returns[t]));
            let diff = g.sub(v, ret);
            let sq = g.square(diff);
            let mask = g.constant(column(&b.mask[t]));
            let sq = g.mul(sq, mask);
            val_terms.push(g.sum(sq));
        }
        let agent_steps = steps * n as f64;
        let actor = sum_scaled(g, &surr_terms, -1.0 / agent_steps);
        let entropy = sum_scaled(g, &ent_terms, -1.0 / agent_steps);
        let value = sum_scaled(g, &val_terms, 1.0 / steps);
        let bonus = g.scale(entropy, -self.config.entropy_coef);
        let weighted_value = g.scale(value, self.config.value_coef);
        let total = g.add(actor, bonus);
        let total = g.add(total, weighted_value);
        PolicyLossVars {
            total,
            actor,
            value,
            entropy,
        }
    }

    pub fn loss_and_gradients(&self, b: &PolicyBatch) -> Result<(PolicyLosses, Gradients)> {
        self.validate_batch(b)?;
        let mut g = Graph::new(&self.params);
        let vars = self.loss_graph(&mut g, b);
        let losses = PolicyLosses {
            total: g.scalar(vars.total),
            actor: g.scalar(vars.actor),
            value: g.scalar(vars.value),
            entropy: g.scalar(vars.entropy),
        };
        Ok((losses, g.backward(vars.total)))
    }

    /// One clipped gradient step on the learner, then the behavior blend.
    pub fn train_step(&mut self, opt: &mut Adam, b: &PolicyBatch, grad_clip: f64) -> Result<PolicyLosses> {
        let (losses, mut grads) = self.loss_and_gradients(b)?;
        if !losses.total.is_finite() || !grads.is_finite() {
            return Err(GawmError::Numeric("policy loss diverged".into()));
        }
        grads.clip_global_norm(grad_clip);
        opt.step(&mut self.params, &grads);
        self.soft_update();
        Ok(losses)
    }

    pub fn soft_update(&mut self) {
        self.behavior.blend_from(&self.params, self.config.target_update_tau);
    }
}

fn column(values: &[f64]) -> Tensor {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column")
}

fn per_row(values: &[f64], n_agents: usize) -> Vec<f64> {
    values
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(n_agents))
        .collect()
}

fn sum_scaled(g: &mut Graph<'_>, terms: &[Var], factor: f64) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, factor)
}

/// Generalized advantage estimation over one segment.
///
/// `delta_t = r_t + gamma * c_t * V_{t+1} - V_t` with `V_L = bootstrap`, and
/// `A_t = delta_t + gamma * lambda * c_t * A_{t+1}`; returns are `A_t + V_t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    continuations: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageBatch> {
    let l = rewards.len();
    if l == 0 || values.len() != l || continuations.len() != l {
        return Err(GawmError::Input(format!(
            "gae needs equal non-zero lengths, got rewards {l}, values {}, continuations {}",
            values.len(),
            continuations.len()
        )));
    }
    let mut advantages = vec![0.0; l];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..l).rev() {
        let c = continuations[t];
        let delta = rewards[t] + gamma * c * next_value - values[t];
        next_adv = delta + gamma * lambda * c * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageBatch { advantages, returns })
}

/// Zero mean, unit (population) std. A constant batch becomes all zeros.
pub fn normalize_advantages(advantages: &[f64]) -> Vec<f64> {
    if advantages.is_empty() {
        return Vec::new();
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    advantages
        .iter()
        .map(|a| (a - mean) / if std > 1e-8 { std } else { 1.0 })
        .collect()
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn ppo_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage)
}

/// Negated mean clipped surrogate, without the entropy bonus.
pub fn ppo_actor_loss(
    new_log_probs: &[f64],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip_epsilon: f64,
) -> Result<f64> {
    let n = new_log_probs.len();
    if n == 0 || old_log_probs.len() != n || advantages.len() != n {
        return Err(GawmError::Input("ppo inputs must have equal non-zero lengths".into()));
    }
    let total: f64 = (0..n)
        .map(|i| ppo_surrogate((new_log_probs[i] - old_log_probs[i]).exp(), advantages[i], clip_epsilon))
        .sum();
    Ok(-total / n as f64)
}

pub fn value_loss(values: &[f64], returns: &[f64]) -> Result<f64> {
    if values.is_empty() || values.len() != returns.len() {
        return Err(GawmError::Input("value loss inputs must have equal non-zero lengths".into()));
    }
    Ok(values.iter().zip(returns).map(|(v, r)| (v - r).powi(2)).sum::<f64>() / values.len() as f64)
}
