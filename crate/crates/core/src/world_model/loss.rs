//! Joint world-model objective.
//!
//! Conventions, all averaged over batch elements and timesteps:
//!
//! * `obs_nll`: unit-variance Gaussian NLL with the additive constant
//!   dropped, i.e. `0.5 * squared error` summed over agents and features.
//! * `reward_nll`: the same convention on the smoothed team reward.
//! * `discount_nll`: Bernoulli NLL of the continuation flag.
//! * `kl`: categorical `KL(posterior || prior)` summed over agents and
//!   latent blocks, with KL balancing and a per-block free-nats floor.
//!
//! Reward and continuation targets belong to the transition that arrives at
//! a timestep, so the first timestep of a sequence has none. With perfect
//! predictions `obs_nll` and `reward_nll` are exactly 0.

use serde::{Deserialize, Serialize};

use super::{SequenceBatch, WorldModelConfig};
use crate::autograd::{Graph, Var};

/// Per-timestep predictions entering the loss, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `(B*N x obs_dim)`
    pub obs_mean: Var,
    /// `(B x 1)`
    pub reward: Var,
    /// `(B x 1)` logit of the continuation probability.
    pub continuation_logit: Var,
    /// `(B*N x n_categoricals*n_classes)`
    pub posterior_logits: Var,
    pub prior_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub obs_nll: Var,
    pub reward_nll: Var,
    pub discount_nll: Var,
    pub kl: Var,
    pub kl_raw: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub obs_nll: f64,
    pub reward_nll: f64,
    pub discount_nll: f64,
    /// Balanced, free-nats-clamped KL that enters `total`.
    pub kl: f64,
    /// Unclamped `KL(posterior || prior)` per sample, summed over agents and
    /// blocks.
    pub kl_raw: f64,
    /// `kl_raw` divided by `n_agents * n_categoricals`.
    pub kl_per_categorical: f64,
}

impl LossVars {
    pub fn read(&self, g: &Graph<'_>, n_agents: usize, n_categoricals: usize) -> LossComponents {
        let kl_raw = g.scalar(self.kl_raw);
        LossComponents {
            total: g.scalar(self.total),
            obs_nll: g.scalar(self.obs_nll),
            reward_nll: g.scalar(self.reward_nll),
            discount_nll: g.scalar(self.discount_nll),
            kl: g.scalar(self.kl),
            kl_raw,
            kl_per_categorical: kl_raw / (n_agents * n_categoricals) as f64,
        }
    }
}

/// Builds the loss over aligned predictions and targets. `steps.len()` must
/// equal `targets.len()`.
pub fn loss_graph(
    g: &mut Graph<'_>,
    steps: &[PredictionVars],
    targets: &SequenceBatch,
    config: &WorldModelConfig,
) -> LossVars {
    let t_len = steps.len();
    assert_eq!(t_len, targets.len(), "predictions and targets misaligned");
    let batch = targets.batch as f64;
    let classes = config.n_classes;

    let mut obs_terms = Vec::with_capacity(t_len);
    let mut rew_terms = Vec::new();
    let mut dis_terms = Vec::new();
    let mut kl_terms = Vec::with_capacity(t_len);
    let mut kl_raw_terms = Vec::with_capacity(t_len);

    for (t, step) in steps.iter().enumerate() {
        let target = g.constant(targets.obs[t].clone());
        let diff = g.sub(step.obs_mean, target);
        let sq = g.square(diff);
        obs_terms.push(g.sum(sq));

        if t > 0 {
            let r = g.constant(column(&targets.rewards[t - 1]));
            let diff = g.sub(step.reward, r);
            let sq = g.square(diff);
            rew_terms.push(g.sum(sq));

            // -ln Bernoulli(c; sigmoid(l)) = softplus(l) - c * l
            let c = g.constant(column(&targets.continuations[t - 1]));
            let sp = g.softplus(step.continuation_logit);
            let cl = g.mul(c, step.continuation_logit);
            let nll = g.sub(sp, cl);
            dis_terms.push(g.sum(nll));
        }

        let (kl, raw) = balanced_kl(
            g,
            step.posterior_logits,
            step.prior_logits,
            classes,
            config.kl_balance,
            config.free_nats,
        );
        kl_terms.push(kl);
        kl_raw_terms.push(raw);
    }

    let per_sample = 1.0 / (batch * t_len as f64);
    let obs_nll = sum_scaled(g, &obs_terms, 0.5 * per_sample);
    let transitions = (t_len - 1) as f64;
    let (reward_nll, discount_nll) = if t_len > 1 {
        (
            sum_scaled(g, &rew_terms, 0.5 / (batch * transitions)),
            sum_scaled(g, &dis_terms, 1.0 / (batch * transitions)),
        )
    } else {
        (g.scalar_constant(0.0), g.scalar_constant(0.0))
    };
    let kl = sum_scaled(g, &kl_terms, per_sample);
    let kl_raw = sum_scaled(g, &kl_raw_terms, per_sample);

    let beta_kl = g.scale(kl, config.beta);
    let a = g.add(obs_nll, reward_nll);
    let b = g.add(a, discount_nll);
    let total = g.add(b, beta_kl);
    LossVars {
        total,
        obs_nll,
        reward_nll,
        discount_nll,
        kl,
        kl_raw,
    }
}

/// `alpha * max(KL(sg(post) || prior), free) + (1 - alpha) * max(KL(post || sg(prior)), free)`
/// summed over rows and blocks, plus the unclamped KL sum.
pub fn balanced_kl(
    g: &mut Graph<'_>,
    posterior_logits: Var,
    prior_logits: Var,
    classes: usize,
    balance: f64,
    free_nats: f64,
) -> (Var, Var) {
    let lp = g.log_softmax_blocks(posterior_logits, classes);
    let lq = g.log_softmax_blocks(prior_logits, classes);
    let p = g.exp(lp);

    // prior-side term: posterior frozen
    let p_sg = g.stop_gradient(p);
    let lp_sg = g.stop_gradient(lp);
    let d = g.sub(lp_sg, lq);
    let prod = g.mul(p_sg, d);
    let kl_prior_side = g.block_sum(prod, classes);

    // posterior-side term: prior frozen
    let lq_sg = g.stop_gradient(lq);
    let d = g.sub(lp, lq_sg);
    let prod = g.mul(p, d);
    let kl_post_side = g.block_sum(prod, classes);

    let raw = g.sum(kl_post_side);
    let a = g.clamp_min(kl_prior_side, free_nats);
    let a = g.sum(a);
    let a = g.scale(a, balance);
    let b = g.clamp_min(kl_post_side, free_nats);
    let b = g.sum(b);
    let b = g.scale(b, 1.0 - balance);
    (g.add(a, b), raw)
}

fn sum_scaled(g: &mut Graph<'_>, terms: &[Var], factor: f64) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, factor)
}

fn column(values: &[f64]) -> crate::autograd::Tensor {
    ndarray::Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column")
}
