//! Global-aware recurrent state-space model.
//!
//! Per agent `i` and step `t` the model keeps a deterministic embedding
//! `h[i]` and a stochastic embedding `z[i]` made of `n_categoricals` one-hot
//! blocks of `n_classes` entries. One transition is
//!
//! ```text
//! e_t     = act_fusion(z_{t-1}, a_{t-1})     attention over all agents' (z, a)
//! h_t     = gru(h_{t-1}, e_t)                shared weights per agent
//! g_t     = obs_fusion(h_t, o_t)             attention over all agents' (h, o)
//! z_t     ~ posterior(g_t)
//! zhat_t  ~ prior(h_t)
//! ```
//!
//! with `h_0 = 0`. Observations are decoded per agent from `(h[i], z[i])`;
//! the reward and continuation heads read every agent through one attention
//! layer followed by mean pooling.
//!
//! All tensors are batch-major: row `b * n_agents + i` is agent `i` of batch
//! element `b`.

mod loss;

use ndarray::{Array2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{balanced_kl, loss_graph, LossComponents, LossVars, PredictionVars};

use crate::autograd::{softmax_blocks, Adam, Gradients, Graph, ParamStore, Tensor, Var};
use crate::error::{GawmError, Result};
use crate::nn::{FusionBlock, GruCell, Linear, Mlp, TransformerLayer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldModelConfig {
    pub h_dim: usize,
    pub e_dim: usize,
    pub g_dim: usize,
    /// Width of the MLP heads and of the reward/continuation attention layer.
    pub hidden: usize,
    pub n_categoricals: usize,
    pub n_classes: usize,
    pub n_heads: usize,
    pub n_attention_layers: usize,
    /// KL weight.
    pub beta: f64,
    /// Weight of the prior-side KL term.
    pub kl_balance: f64,
    /// Floor per latent block.
    pub free_nats: f64,
    pub obs_fusion_enabled: bool,
    /// Add a learned identity embedding to every agent token.
    pub agent_identity: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            h_dim: 64,
            e_dim: 64,
            g_dim: 64,
            hidden: 64,
            n_categoricals: 16,
            n_classes: 16,
            n_heads: 2,
            n_attention_layers: 1,
            beta: 0.1,
            kl_balance: 0.8,
            free_nats: 0.1,
            obs_fusion_enabled: true,
            agent_identity: true,
        }
    }
}

impl WorldModelConfig {
    pub fn z_dim(&self) -> usize {
        self.n_categoricals * self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("h_dim", self.h_dim),
            ("e_dim", self.e_dim),
            ("g_dim", self.g_dim),
            ("hidden", self.hidden),
            ("n_categoricals", self.n_categoricals),
            ("n_classes", self.n_classes),
            ("n_heads", self.n_heads),
            ("n_attention_layers", self.n_attention_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(GawmError::Config(format!("world_model.{name} must be >= 1")));
        }
        for (name, width) in [("e_dim", self.e_dim), ("g_dim", self.g_dim), ("hidden", self.hidden)] {
            if width % self.n_heads != 0 {
                return Err(GawmError::Config(format!(
                    "world_model.{name} = {width} is not divisible by n_heads = {}",
                    self.n_heads
                )));
            }
        }
        if !(self.beta >= 0.0) {
            return Err(GawmError::Config("world_model.beta must be >= 0".into()));
        }
        if !(self.kl_balance > 0.0 && self.kl_balance < 1.0) {
            return Err(GawmError::Config("world_model.kl_balance must be in (0, 1)".into()));
        }
        if !(self.free_nats >= 0.0) {
            return Err(GawmError::Config("world_model.free_nats must be >= 0".into()));
        }
        Ok(())
    }
}

/// Latent state of every agent of every batch element at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// `(B*N x h_dim)`, entries in (-1, 1).
    pub h: Tensor,
    /// `(B*N x n_categoricals*n_classes)`, concatenated one-hot blocks.
    pub z: Tensor,
    /// Logits of the distribution `z` was drawn from.
    pub z_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionInputs {
    pub e: Tensor,
    pub g: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// `(B*N x obs_dim)`
    pub obs_mean: Tensor,
    /// One team-reward mean per batch element.
    pub reward_mean: Vec<f64>,
    /// One continuation probability per batch element, in [0, 1].
    pub continuation_prob: Vec<f64>,
    pub continuation_logit: Vec<f64>,
}

/// Reward and continuation estimates of each agent's token on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct PerAgentHeads {
    /// One entry per row (`B*N`).
    pub reward_mean: Vec<f64>,
    pub continuation_prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservedStep {
    pub latent: LatentState,
    pub reconstruction: Reconstruction,
    pub prior_logits: Tensor,
    pub posterior_logits: Tensor,
}

/// How stochastic latents are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LatentSampling {
    #[default]
    Sample,
    /// Arg-max class of every block.
    Mode,
}

/// A batch of aligned sequences: `T` observations and `T - 1` transitions.
/// `actions[t]`, `rewards[t]` and `continuations[t]` describe the step from
/// `obs[t]` to `obs[t + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    /// `T` entries of `(B*N x obs_dim)`.
    pub obs: Vec<Tensor>,
    /// `T - 1` entries of `B*N` actions.
    pub actions: Vec<Vec<usize>>,
    /// `T - 1` entries of `B` reward targets.
    pub rewards: Vec<Vec<f64>>,
    /// `T - 1` entries of `B` continuation flags.
    pub continuations: Vec<Vec<f64>>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn validate(&self, n_agents: usize, obs_dim: usize, n_actions: usize) -> Result<()> {
        if self.obs.is_empty() {
            return Err(GawmError::Input("sequence must contain at least one step".into()));
        }
        let rows = self.batch * n_agents;
        let t = self.obs.len();
        if self.actions.len() + 1 != t
            || self.rewards.len() + 1 != t
            || self.continuations.len() + 1 != t
        {
            return Err(GawmError::Input(format!(
                "sequence with {t} observations needs {} actions, rewards and continuations",
                t - 1
            )));
        }
        for o in &self.obs {
            if o.dim() != (rows, obs_dim) {
                return Err(GawmError::Shape(format!(
                    "observation block {:?}, expected ({rows}, {obs_dim})",
                    o.dim()
                )));
            }
        }
        for a in &self.actions {
            if a.len() != rows {
                return Err(GawmError::Shape(format!("{} actions, expected {rows}", a.len())));
            }
            if a.iter().any(|&x| x >= n_actions) {
                return Err(GawmError::Input("action out of range".into()));
            }
        }
        if self
            .rewards
            .iter()
            .chain(&self.continuations)
            .any(|v| v.len() != self.batch)
        {
            return Err(GawmError::Shape("per-step targets must have batch length".into()));
        }
        Ok(())
    }
}

/// Graph nodes of one latent step.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub h: Var,
    pub z: Var,
    pub logits: Var,
}

pub struct WorldModel {
    pub config: WorldModelConfig,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub params: ParamStore,
    act_fusion: FusionBlock,
    recurrent: GruCell,
    obs_fusion: FusionBlock,
    posterior_net: Mlp,
    prior_net: Mlp,
    obs_head: Mlp,
    global_embed: Linear,
    global_attention: TransformerLayer,
    reward_head: Mlp,
    discount_head: Mlp,
}

impl WorldModel {
    pub fn new(
        config: WorldModelConfig,
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
        let zd = c.z_dim();
        let act_fusion = FusionBlock::new(
            &mut store,
            "act_fusion",
            zd + n_actions,
            c.e_dim,
            c.e_dim,
            n_agents,
            c.n_heads,
            c.n_attention_layers,
            c.agent_identity,
            &mut rng,
        );
        let recurrent = GruCell::new(&mut store, "recurrent", c.e_dim, c.h_dim, &mut rng);
        let obs_fusion = FusionBlock::new(
            &mut store,
            "obs_fusion",
            c.h_dim + obs_dim,
            c.g_dim,
            c.g_dim,
            n_agents,
            c.n_heads,
            c.n_attention_layers,
            c.agent_identity,
            &mut rng,
        );
        let posterior_net = Mlp::new(&mut store, "posterior", &[c.g_dim, c.hidden, zd], &mut rng);
        let prior_net = Mlp::new(&mut store, "prior", &[c.h_dim, c.hidden, zd], &mut rng);
        let obs_head = Mlp::new(&mut store, "obs_head", &[c.h_dim + zd, c.hidden, obs_dim], &mut rng);
        let global_embed = Linear::new(&mut store, "global.embed", c.h_dim + zd, c.hidden, &mut rng);
        let global_attention =
            TransformerLayer::new(&mut store, "global.attn", c.hidden, c.n_heads, &mut rng);
        let reward_head = Mlp::new(&mut store, "reward_head", &[c.hidden, c.hidden, 1], &mut rng);
        let discount_head = Mlp::new(&mut store, "discount_head", &[c.hidden, c.hidden, 1], &mut rng);
        Ok(Self {
            config,
            n_agents,
            obs_dim,
            n_actions,
            params: store,
            act_fusion,
            recurrent,
            obs_fusion,
            posterior_net,
            prior_net,
            obs_head,
            global_embed,
            global_attention,
            reward_head,
            discount_head,
        })
    }

    fn batch_of(&self, rows: usize, what: &str) -> Result<usize> {
        if rows == 0 || rows % self.n_agents != 0 {
            return Err(GawmError::Shape(format!(
                "{what} has {rows} rows, not a positive multiple of {} agents",
                self.n_agents
            )));
        }
        Ok(rows / self.n_agents)
    }

    fn check(&self, t: &Tensor, cols: usize, what: &str) -> Result<usize> {
        if t.ncols() != cols {
            return Err(GawmError::Shape(format!(
                "{what} has {} columns, expected {cols}",
                t.ncols()
            )));
        }
        self.batch_of(t.nrows(), what)
    }

    fn check_actions(&self, actions: &[usize], rows: usize) -> Result<()> {
        if actions.len() != rows {
            return Err(GawmError::Shape(format!(
                "{} actions for {rows} agent rows",
                actions.len()
            )));
        }
        if actions.iter().any(|&a| a >= self.n_actions) {
            return Err(GawmError::Input(format!(
                "action outside [0, {})",
                self.n_actions
            )));
        }
        Ok(())
    }

    fn one_hot_actions(&self, actions: &[usize]) -> Tensor {
        let mut t = Array2::zeros((actions.len(), self.n_actions));
        for (i, &a) in actions.iter().enumerate() {
            t[[i, a]] = 1.0;
        }
        t
    }

    // ---- graph-level building blocks -------------------------------------

    pub fn act_fusion_var(&self, g: &mut Graph<'_>, z: Var, actions: &[usize]) -> Var {
        let a = g.constant(self.one_hot_actions(actions));
        let tokens = g.concat_cols(&[z, a]);
        self.act_fusion.forward(g, tokens, false)
    }

    pub fn obs_fusion_var(&self, g: &mut Graph<'_>, h: Var, obs: Var) -> Var {
        let tokens = g.concat_cols(&[h, obs]);
        self.obs_fusion
            .forward(g, tokens, !self.config.obs_fusion_enabled)
    }

    pub fn recurrent_var(&self, g: &mut Graph<'_>, h_prev: Var, e: Var) -> Var {
        self.recurrent.forward(g, e, h_prev)
    }

    pub fn posterior_logits_var(&self, g: &mut Graph<'_>, fused: Var) -> Var {
        self.posterior_net.forward(g, fused)
    }

    pub fn prior_logits_var(&self, g: &mut Graph<'_>, h: Var) -> Var {
        self.prior_net.forward(g, h)
    }

    /// Straight-through categorical sample: the forward value is one-hot, the
    /// gradient is that of the block softmax.
    pub fn sample_var<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        logits: Var,
        mode: LatentSampling,
        rng: &mut R,
    ) -> Var {
        let classes = self.config.n_classes;
        let probs = g.softmax_blocks(logits, classes);
        let pv = g.value(probs).clone();
        let one_hot = g.frozen(|| sample_one_hot(&pv, classes, mode, rng));
        let frozen_probs = g.stop_gradient(probs);
        let delta = g.sub(probs, frozen_probs);
        g.add(one_hot, delta)
    }

    /// Returns `(obs_mean, reward, continuation_logit)`. With `per_agent`
    /// every token is pooled on its own and the reward/continuation outputs
    /// have one row per agent instead of one per batch element.
    pub fn reconstruct_var(&self, g: &mut Graph<'_>, h: Var, z: Var, per_agent: bool) -> (Var, Var, Var) {
        let hz = g.concat_cols(&[h, z]);
        let obs_mean = self.obs_head.forward(g, hz);
        let tokens = self.global_embed.forward(g, hz);
        let mixed = self
            .global_attention
            .forward(g, tokens, self.n_agents, per_agent);
        let pooled = if per_agent {
            mixed
        } else {
            g.group_mean(mixed, self.n_agents)
        };
        let reward = self.reward_head.forward(g, pooled);
        let logit = self.discount_head.forward(g, pooled);
        (obs_mean, reward, logit)
    }

    /// Posterior pass over a sequence batch; returns the latent and the loss
    /// inputs of every step.
    pub fn observe_graph<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        seq: &SequenceBatch,
        mode: LatentSampling,
        rng: &mut R,
    ) -> Vec<(LatentVars, PredictionVars)> {
        let rows = seq.batch * self.n_agents;
        let mut h = g.constant(Array2::zeros((rows, self.config.h_dim)));
        let mut prev_z: Option<Var> = None;
        let mut out = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            if let Some(z) = prev_z {
                let e = self.act_fusion_var(g, z, &seq.actions[t - 1]);
                h = self.recurrent_var(g, h, e);
            }
            let obs = g.constant(seq.obs[t].clone());
            let fused = self.obs_fusion_var(g, h, obs);
            let post = self.posterior_logits_var(g, fused);
            let prior = self.prior_logits_var(g, h);
            let z = self.sample_var(g, post, mode, rng);
            let (obs_mean, reward, continuation_logit) = self.reconstruct_var(g, h, z, false);
            out.push((
                LatentVars { h, z, logits: post },
                PredictionVars {
                    obs_mean,
                    reward,
                    continuation_logit,
                    posterior_logits: post,
                    prior_logits: prior,
                },
            ));
            prev_z = Some(z);
        }
        out
    }

    /// Observe-then-score graph for one batch.
    pub fn loss_vars<R: Rng>(&self, g: &mut Graph<'_>, seq: &SequenceBatch, rng: &mut R) -> LossVars {
        let steps: Vec<PredictionVars> = self
            .observe_graph(g, seq, LatentSampling::Sample, rng)
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        loss_graph(g, &steps, seq, &self.config)
    }

    pub fn loss_and_gradients<R: Rng>(
        &self,
        seq: &SequenceBatch,
        rng: &mut R,
    ) -> Result<(LossComponents, Gradients)> {
        seq.validate(self.n_agents, self.obs_dim, self.n_actions)?;
        let mut g = Graph::new(&self.params);
        let vars = self.loss_vars(&mut g, seq, rng);
        let comps = vars.read(&g, self.n_agents, self.config.n_categoricals);
        let grads = g.backward(vars.total);
        Ok((comps, grads))
    }

    /// One clipped gradient step. Returns the loss before the update.
    pub fn train_step<R: Rng>(
        &mut self,
        opt: &mut Adam,
        seq: &SequenceBatch,
        grad_clip: f64,
        rng: &mut R,
    ) -> Result<LossComponents> {
        let (comps, mut grads) = self.loss_and_gradients(seq, rng)?;
        if !comps.total.is_finite() || !grads.is_finite() {
            return Err(GawmError::Numeric("world-model loss diverged".into()));
        }
        grads.clip_global_norm(grad_clip);
        opt.step(&mut self.params, &grads);
        Ok(comps)
    }

    // ---- value-level operations -------------------------------------------

    pub fn act_fusion(&self, z: &Tensor, joint_action: &[usize]) -> Result<Tensor> {
        self.check(z, self.config.z_dim(), "z")?;
        self.check_actions(joint_action, z.nrows())?;
        let mut g = Graph::new(&self.params);
        let zv = g.constant(z.clone());
        let e = self.act_fusion_var(&mut g, zv, joint_action);
        Ok(g.value(e).clone())
    }

    pub fn obs_fusion(&self, h: &Tensor, joint_obs: &Tensor) -> Result<Tensor> {
        let b = self.check(h, self.config.h_dim, "h")?;
        if self.check(joint_obs, self.obs_dim, "observations")? != b {
            return Err(GawmError::Shape("h and observations disagree on rows".into()));
        }
        let mut g = Graph::new(&self.params);
        let hv = g.constant(h.clone());
        let ov = g.constant(joint_obs.clone());
        let out = self.obs_fusion_var(&mut g, hv, ov);
        Ok(g.value(out).clone())
    }

    pub fn fusion(&self, z: &Tensor, joint_action: &[usize], h: &Tensor, joint_obs: &Tensor) -> Result<FusionInputs> {
        Ok(FusionInputs {
            e: self.act_fusion(z, joint_action)?,
            g: self.obs_fusion(h, joint_obs)?,
        })
    }

    pub fn recurrent_step(&self, h_prev: &Tensor, e: &Tensor) -> Result<Tensor> {
        let b = self.check(h_prev, self.config.h_dim, "h")?;
        if self.check(e, self.config.e_dim, "e")? != b {
            return Err(GawmError::Shape("h and e disagree on rows".into()));
        }
        let mut g = Graph::new(&self.params);
        let hv = g.constant(h_prev.clone());
        let ev = g.constant(e.clone());
        let out = self.recurrent_var(&mut g, hv, ev);
        Ok(g.value(out).clone())
    }

    /// Posterior logits and a sample from the obs-fusion output.
    pub fn posterior<R: Rng>(&self, fused: &Tensor, mode: LatentSampling, rng: &mut R) -> Result<(Tensor, Tensor)> {
        self.check(fused, self.config.g_dim, "g")?;
        if fused.iter().any(|x| !x.is_finite()) {
            return Err(GawmError::Numeric("non-finite obs-fusion output".into()));
        }
        let mut g = Graph::new(&self.params);
        let gv = g.constant(fused.clone());
        let logits = self.posterior_logits_var(&mut g, gv);
        let z = self.sample_var(&mut g, logits, mode, rng);
        Ok((g.value(logits).clone(), g.value(z).clone()))
    }

    pub fn prior<R: Rng>(&self, h: &Tensor, mode: LatentSampling, rng: &mut R) -> Result<(Tensor, Tensor)> {
        self.check(h, self.config.h_dim, "h")?;
        if h.iter().any(|x| !x.is_finite()) {
            return Err(GawmError::Numeric("non-finite recurrent state".into()));
        }
        let mut g = Graph::new(&self.params);
        let hv = g.constant(h.clone());
        let logits = self.prior_logits_var(&mut g, hv);
        let z = self.sample_var(&mut g, logits, mode, rng);
        Ok((g.value(logits).clone(), g.value(z).clone()))
    }

    pub fn reconstruct(&self, h: &Tensor, z: &Tensor) -> Result<Reconstruction> {
        let b = self.check(h, self.config.h_dim, "h")?;
        if self.check(z, self.config.z_dim(), "z")? != b {
            return Err(GawmError::Shape("h and z disagree on rows".into()));
        }
        let mut g = Graph::new(&self.params);
        let hv = g.constant(h.clone());
        let zv = g.constant(z.clone());
        let (obs, reward, logit) = self.reconstruct_var(&mut g, hv, zv, false);
        Ok(read_reconstruction(&g, obs, reward, logit))
    }

    /// Reward/continuation heads evaluated with each agent's token alone.
    pub fn reconstruct_per_agent(&self, h: &Tensor, z: &Tensor) -> Result<PerAgentHeads> {
        let b = self.check(h, self.config.h_dim, "h")?;
        if self.check(z, self.config.z_dim(), "z")? != b {
            return Err(GawmError::Shape("h and z disagree on rows".into()));
        }
        let mut g = Graph::new(&self.params);
        let hv = g.constant(h.clone());
        let zv = g.constant(z.clone());
        let (_, reward, logit) = self.reconstruct_var(&mut g, hv, zv, true);
        Ok(PerAgentHeads {
            reward_mean: g.value(reward).iter().copied().collect(),
            continuation_prob: g.value(logit).iter().map(|&l| crate::autograd::sigmoid(l)).collect(),
        })
    }

    /// `h = 0` and `z` drawn from the prior at `h = 0`.
    pub fn initial_state<R: Rng>(&self, batch: usize, mode: LatentSampling, rng: &mut R) -> Result<LatentState> {
        let h = Array2::zeros((batch * self.n_agents, self.config.h_dim));
        let (z_logits, z) = self.prior(&h, mode, rng)?;
        Ok(LatentState { h, z, z_logits })
    }

    /// Posterior pass over a sequence, one entry per observation.
    pub fn observe_sequence<R: Rng>(
        &self,
        seq: &SequenceBatch,
        mode: LatentSampling,
        rng: &mut R,
    ) -> Result<Vec<ObservedStep>> {
        seq.validate(self.n_agents, self.obs_dim, self.n_actions)?;
        let mut g = Graph::new(&self.params);
        let steps = self.observe_graph(&mut g, seq, mode, rng);
        Ok(steps
            .into_iter()
            .map(|(lat, pred)| ObservedStep {
                latent: LatentState {
                    h: g.value(lat.h).clone(),
                    z: g.value(lat.z).clone(),
                    z_logits: g.value(lat.logits).clone(),
                },
                reconstruction: read_reconstruction(&g, pred.obs_mean, pred.reward, pred.continuation_logit),
                prior_logits: g.value(pred.prior_logits).clone(),
                posterior_logits: g.value(pred.posterior_logits).clone(),
            })
            .collect())
    }

    /// One prior step: never looks at a real observation.
    pub fn imagine_step<R: Rng>(
        &self,
        latent: &LatentState,
        joint_action: &[usize],
        mode: LatentSampling,
        rng: &mut R,
    ) -> Result<(LatentState, Reconstruction)> {
        let b = self.check(&latent.h, self.config.h_dim, "h")?;
        if self.check(&latent.z, self.config.z_dim(), "z")? != b {
            return Err(GawmError::Shape("h and z disagree on rows".into()));
        }
        self.check_actions(joint_action, latent.h.nrows())?;
        let mut g = Graph::new(&self.params);
        let h0 = g.constant(latent.h.clone());
        let z0 = g.constant(latent.z.clone());
        let e = self.act_fusion_var(&mut g, z0, joint_action);
        let h = self.recurrent_var(&mut g, h0, e);
        let logits = self.prior_logits_var(&mut g, h);
        let z = self.sample_var(&mut g, logits, mode, rng);
        let (obs, reward, cont) = self.reconstruct_var(&mut g, h, z, false);
        let recon = read_reconstruction(&g, obs, reward, cont);
        Ok((
            LatentState {
                h: g.value(h).clone(),
                z: g.value(z).clone(),
                z_logits: g.value(logits).clone(),
            },
            recon,
        ))
    }
}

/// Value-level loss over the outputs of [`WorldModel::observe_sequence`].
pub fn world_model_loss(
    outputs: &[ObservedStep],
    targets: &SequenceBatch,
    config: &WorldModelConfig,
) -> Result<LossComponents> {
    if outputs.len() != targets.len() {
        return Err(GawmError::Input(format!(
            "{} outputs for {} target steps",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Err(GawmError::Input("empty sequence".into()));
    }
    let n_agents = outputs[0].reconstruction.obs_mean.nrows() / targets.batch.max(1);
    let mut g = Graph::detached();
    let steps: Vec<PredictionVars> = outputs
        .iter()
        .map(|o| {
            let r = &o.reconstruction;
            PredictionVars {
                obs_mean: g.constant(r.obs_mean.clone()),
                reward: g.constant(column(&r.reward_mean)),
                continuation_logit: g.constant(column(&r.continuation_logit)),
                posterior_logits: g.constant(o.posterior_logits.clone()),
                prior_logits: g.constant(o.prior_logits.clone()),
            }
        })
        .collect();
    let vars = loss_graph(&mut g, &steps, targets, config);
    Ok(vars.read(&g, n_agents, config.n_categoricals))
}

fn column(values: &[f64]) -> Tensor {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column")
}

fn read_reconstruction(g: &Graph<'_>, obs: Var, reward: Var, logit: Var) -> Reconstruction {
    let logits: Vec<f64> = g.value(logit).iter().copied().collect();
    Reconstruction {
        obs_mean: g.value(obs).clone(),
        reward_mean: g.value(reward).iter().copied().collect(),
        continuation_prob: logits.iter().map(|&l| crate::autograd::sigmoid(l)).collect(),
        continuation_logit: logits,
    }
}

/// Draws one class per block of `probs` and returns the concatenated one-hot
/// blocks.
pub fn sample_one_hot<R: Rng>(probs: &Tensor, classes: usize, mode: LatentSampling, rng: &mut R) -> Tensor {
    let mut out = Array2::zeros(probs.dim());
    for (r, row) in probs.axis_iter(Axis(0)).enumerate() {
        for start in (0..row.len()).step_by(classes) {
            let block = row.slice(ndarray::s![start..start + classes]);
            let k = match mode {
                LatentSampling::Mode => argmax(block.iter().copied()),
                LatentSampling::Sample => WeightedIndex::new(block.iter().map(|p| p.max(0.0)))
                    .map(|d| d.sample(rng))
                    .unwrap_or_else(|_| argmax(block.iter().copied())),
            };
            out[[r, start + k]] = 1.0;
        }
    }
    out
}

pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Block softmax of a logits tensor.
pub fn block_probs(logits: &Tensor, classes: usize) -> Tensor {
    softmax_blocks(logits, classes)
}

#[cfg(test)]
mod tests;
