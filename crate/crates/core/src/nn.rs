//! Layers built on the autograd tape. Each layer owns only [`ParamId`]s; the
//! tensors live in the model's [`ParamStore`].

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), in_dim, out_dim, in_dim, rng);
        let b = store.add_zeros(format!("{name}.b"), 1, out_dim);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Scales the weights in place, e.g. to start a policy head near uniform.
    pub fn scale_weights(&self, store: &mut ParamStore, factor: f64) {
        store.get_mut(self.w).mapv_inplace(|x| x * factor);
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Dense layers with ELU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i + 1 < n {
                x = g.elu(x);
            }
        }
        x
    }
}

/// Gated recurrent unit shared across all rows of its input.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    recurrent: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.x"), in_dim, 3 * hidden, rng),
            recurrent: Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gx = self.input.forward(g, x);
        let gh = self.recurrent.forward(g, h);
        let (xr, xu, xn) = (
            g.slice_cols(gx, 0, hd),
            g.slice_cols(gx, hd, 2 * hd),
            g.slice_cols(gx, 2 * hd, 3 * hd),
        );
        let (hr, hu, hn) = (
            g.slice_cols(gh, 0, hd),
            g.slice_cols(gh, hd, 2 * hd),
            g.slice_cols(gh, 2 * hd, 3 * hd),
        );
        let r = g.add(xr, hr);
        let reset = g.sigmoid(r);
        let u = g.add(xu, hu);
        let update = g.sigmoid(u);
        let gated = g.mul(reset, hn);
        let n = g.add(xn, gated);
        let cand = g.tanh(n);
        // h' = (1 - u) * n + u * h
        let diff = g.sub(h, cand);
        let keep = g.mul(update, diff);
        g.add(cand, keep)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), 1, dim),
            bias: store.add_zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let y = g.layer_norm(x, 1e-5);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(y, gain);
        g.add_row(y, bias)
    }
}

/// Pre-norm transformer encoder layer whose attention runs across the agent
/// tokens of each batch element.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    norm_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "heads must divide model width");
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            proj: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff1"), dim, 2 * dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff2"), 2 * dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, group: usize, self_only: bool) -> Var {
        let n = self.norm_attn.forward(g, x);
        let q = self.query.forward(g, n);
        let k = self.key.forward(g, n);
        let v = self.value.forward(g, n);
        let a = g.attention(q, k, v, group, self.heads, self_only);
        let a = self.proj.forward(g, a);
        let x = g.add(x, a);
        let n = self.norm_ff.forward(g, x);
        let f = self.ff_in.forward(g, n);
        let f = g.elu(f);
        let f = self.ff_out.forward(g, f);
        g.add(x, f)
    }
}

/// Token embedding, optional learned per-agent identity, a stack of
/// transformer layers and an output projection. Rows are grouped per batch
/// element, `n_agents` rows each.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    embed: Linear,
    identity: Option<ParamId>,
    layers: Vec<TransformerLayer>,
    out: Linear,
    pub n_agents: usize,
}

impl FusionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        out_dim: usize,
        n_agents: usize,
        heads: usize,
        n_layers: usize,
        agent_identity: bool,
        rng: &mut R,
    ) -> Self {
        let embed = Linear::new(store, &format!("{name}.embed"), in_dim, width, rng);
        let identity = agent_identity.then(|| {
            store.add_uniform(format!("{name}.agent_id"), n_agents, width, width, rng)
        });
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), width, heads, rng))
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), width, out_dim, rng);
        Self {
            embed,
            identity,
            layers,
            out,
            n_agents,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var, self_only: bool) -> Var {
        let mut x = self.embed.forward(g, tokens);
        if let Some(id) = self.identity {
            let ids = g.param(id);
            x = g.add_tiled(x, ids);
        }
        for layer in &self.layers {
            x = layer.forward(g, x, self.n_agents, self_only);
        }
        self.out.forward(g, x)
    }
}
