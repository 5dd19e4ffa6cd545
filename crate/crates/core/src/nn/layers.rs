//! Layers shared by the answer models.
//!
//! Layers hold only [`ParamId`]s; the weights live in a [`ParamStore`] and
//! every forward pass records onto a fresh [`Graph`].

use std::sync::Arc;

use super::{Graph, Mat, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Self { w: store.fan_in(format!("{name}.w"), input, output), b: store.zeros(format!("{name}.b"), 1, output) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Layer normalization with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self { gain: store.ones(format!("{name}.gain"), 1, dim), bias: store.zeros(format!("{name}.bias"), 1, dim) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Self {
        Self { table: store.uniform(format!("{name}.table"), vocab, dim, 0.5) }
    }

    pub fn forward(&self, g: &mut Graph, tokens: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, tokens)
    }
}

/// Single-layer gated recurrent unit; returns the final hidden state.
#[derive(Debug, Clone)]
pub struct Gru {
    input: Linear,
    hidden: ParamId,
    dim: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, dim: usize) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), input, 3 * dim),
            hidden: store.fan_in(format!("{name}.hidden"), dim, 3 * dim),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let d = self.dim;
        let steps = g.shape(x).0;
        let xs = self.input.forward(g, x);
        let u = g.param(self.hidden);
        let mut h = g.input(Mat::zeros((1, d)));
        for t in 0..steps {
            let xt = g.slice_rows(xs, t, t + 1);
            let hu = g.matmul(h, u);
            let xz = g.slice_cols(xt, 0, d);
            let hz = g.slice_cols(hu, 0, d);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let xr = g.slice_cols(xt, d, 2 * d);
            let hr = g.slice_cols(hu, d, 2 * d);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let xn = g.slice_cols(xt, 2 * d, 3 * d);
            let hn = g.slice_cols(hu, 2 * d, 3 * d);
            let gated = g.mul(r, hn);
            let n = g.add(xn, gated);
            let n = g.tanh(n);
            let diff = g.sub(h, n);
            let keep = g.mul(z, diff);
            h = g.add(n, keep);
        }
        h
    }
}

/// Multi-head scaled dot-product attention with hard key masking.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "heads must divide the width");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, &format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    /// Returns the attended rows and the head-averaged weight matrix
    /// (`query rows × key rows`).
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var, mask: &Arc<[bool]>) -> (Var, Mat) {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Mat::zeros((g.shape(query).0, g.shape(context).0));
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, (h + 1) * hd);
            let kh = g.slice_cols(k, h * hd, (h + 1) * hd);
            let vh = g.slice_cols(v, h * hd, (h + 1) * hd);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let att = g.masked_softmax(scores, mask.clone());
            weights += g.value(att);
            outs.push(g.matmul(att, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.out.forward(g, cat), weights / self.heads as f64)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Self {
        Self { up: Linear::new(store, &format!("{name}.up"), dim, hidden), down: Linear::new(store, &format!("{name}.down"), hidden, dim) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Post-norm residual attention sublayer: `LN(x + MHA(x, ctx))`.
#[derive(Debug, Clone)]
pub struct AttentionSublayer {
    att: MultiHeadAttention,
    norm: LayerNorm,
}

impl AttentionSublayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        Self { att: MultiHeadAttention::new(store, &format!("{name}.att"), dim, heads), norm: LayerNorm::new(store, &format!("{name}.ln"), dim) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, context: Var, mask: &Arc<[bool]>) -> (Var, Mat) {
        let (a, w) = self.att.forward(g, x, context, mask);
        let r = g.add(x, a);
        (self.norm.forward(g, r), w)
    }
}

/// Post-norm residual feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct FeedForwardSublayer {
    ff: FeedForward,
    norm: LayerNorm,
}

impl FeedForwardSublayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self { ff: FeedForward::new(store, &format!("{name}.ff"), dim, 2 * dim), norm: LayerNorm::new(store, &format!("{name}.ln"), dim) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let f = self.ff.forward(g, x);
        let r = g.add(x, f);
        self.norm.forward(g, r)
    }
}

/// Standard encoder block: attention sublayer then feed-forward sublayer.
/// With `context == x` it is self-attention, otherwise guided attention.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub att: AttentionSublayer,
    pub ff: FeedForwardSublayer,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        Self { att: AttentionSublayer::new(store, &format!("{name}.sa"), dim, heads), ff: FeedForwardSublayer::new(store, &format!("{name}.ffn"), dim) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, context: Var, mask: &Arc<[bool]>) -> (Var, Mat) {
        let (a, w) = self.att.forward(g, x, context, mask);
        (self.ff.forward(g, a), w)
    }
}

/// Learned single-query attention pooling (MCAN's AttFlat with one glimpse).
#[derive(Debug, Clone)]
pub struct AttFlat {
    score_hidden: Linear,
    score: Linear,
    out: Linear,
}

impl AttFlat {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            score_hidden: Linear::new(store, &format!("{name}.mlp"), dim, dim),
            score: Linear::new(store, &format!("{name}.score"), dim, 1),
            out: Linear::new(store, &format!("{name}.out"), dim, dim),
        }
    }

    /// Returns the pooled `1 × d` vector and the pooling weights.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: &Arc<[bool]>) -> (Var, Vec<f64>) {
        let h = self.score_hidden.forward(g, x);
        let h = g.relu(h);
        let s = self.score.forward(g, h);
        let s = g.transpose(s);
        let a = g.masked_softmax(s, mask.clone());
        let weights = g.value(a).row(0).to_vec();
        let pooled = g.matmul(a, x);
        (self.out.forward(g, pooled), weights)
    }
}
