//! Bottom-up/top-down attention with a point.
//!
//! The local model scores each point-containing region against the question
//! (`relu(W_v v_i) ⊙ relu(W_q q)` → two fully connected layers → masked
//! softmax), pools the raw region rows into `v^pt`, and fuses
//! `relu(W q) ⊙ relu(W v^pt)` through two more layers. The global variant
//! adds a second attention over all regions conditioned on `q` and `v^pt`
//! and fuses `(q ⊙ v^pt) ⊕ (q ⊙ v^all)`.

use std::sync::Arc;

use super::{AttentionRecord, Forward, ModelConfig, Regions, Sample, Streams};
use crate::nn::layers::{Embedding, Gru, Linear};
use crate::nn::{Graph, ParamStore, Var};

struct Scorer {
    v: Linear,
    q: Linear,
    extra: Option<Linear>,
    fc1: Linear,
    fc2: Linear,
}

impl Scorer {
    fn new(store: &mut ParamStore, name: &str, input: usize, d: usize, conditioned: bool) -> Self {
        Self {
            v: Linear::new(store, &format!("{name}.v"), input, d),
            q: Linear::new(store, &format!("{name}.q"), d, d),
            extra: conditioned.then(|| Linear::new(store, &format!("{name}.pt"), input, d)),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d),
            fc2: Linear::new(store, &format!("{name}.fc2"), d, 1),
        }
    }

    /// Returns the pooled raw rows (`1 × input`) and the weights.
    fn attend(&self, g: &mut Graph, q: Var, regions: &Regions, condition: Option<Var>) -> (Var, Vec<f64>) {
        let rows = g.input(regions.rows.clone());
        let pv = self.v.forward(g, rows);
        let pv = g.relu(pv);
        let pq = self.q.forward(g, q);
        let pq = g.relu(pq);
        let mut joint = g.mul_row(pv, pq);
        if let (Some(lin), Some(c)) = (&self.extra, condition) {
            let pc = lin.forward(g, c);
            let pc = g.relu(pc);
            joint = g.mul_row(joint, pc);
        }
        let h = self.fc1.forward(g, joint);
        let h = g.relu(h);
        let scores = self.fc2.forward(g, h);
        let scores = g.transpose(scores);
        let a = g.masked_softmax(scores, Arc::clone(&regions.mask));
        let weights = g.value(a).row(0).to_vec();
        (g.matmul(a, rows), weights)
    }
}

pub struct Pythia {
    streams: Streams,
    embed: Embedding,
    gru: Gru,
    local: Scorer,
    global: Option<Scorer>,
    fuse_q: Linear,
    fuse_v: Linear,
    fuse_q_all: Option<Linear>,
    fuse_all: Option<Linear>,
    fc1: Linear,
    fc2: Linear,
}

impl Pythia {
    pub fn new(store: &mut ParamStore, c: &ModelConfig) -> Self {
        let d = c.d;
        let input = c.input_dim();
        let global = c.architecture == super::Architecture::PythiaGlobal;
        Self {
            streams: c.streams,
            embed: Embedding::new(store, "q.embed", c.vocab.len(), d),
            gru: Gru::new(store, "q.gru", d, d),
            local: Scorer::new(store, "att.local", input, d, false),
            global: global.then(|| Scorer::new(store, "att.global", input, d, true)),
            fuse_q: Linear::new(store, "fuse.q", d, d),
            fuse_v: Linear::new(store, "fuse.pt", input, d),
            fuse_q_all: global.then(|| Linear::new(store, "fuse.q_all", d, d)),
            fuse_all: global.then(|| Linear::new(store, "fuse.all", input, d)),
            fc1: Linear::new(store, "cls.fc1", if global { 2 * d } else { d }, d),
            fc2: Linear::new(store, "cls.fc2", d, c.answers.len()),
        }
    }

    /// Final GRU state, `1 × d`.
    pub fn encode_question(&self, g: &mut Graph, tokens: &[usize]) -> Var {
        let e = self.embed.forward(g, tokens);
        self.gru.forward(g, e)
    }

    fn product(g: &mut Graph, a: &Linear, x: Var, b: &Linear, y: Var) -> Var {
        let pa = a.forward(g, x);
        let pa = g.relu(pa);
        let pb = b.forward(g, y);
        let pb = g.relu(pb);
        g.mul(pa, pb)
    }

    pub(crate) fn forward(&self, g: &mut Graph, s: &Sample) -> Forward {
        let q = self.encode_question(g, &s.tokens);
        let mut attention = AttentionRecord::default();
        let fused = if self.streams == Streams::QOnly && self.global.is_none() {
            let f = self.fuse_q.forward(g, q);
            g.relu(f)
        } else {
            let regions = match (self.global.is_some(), self.streams) {
                (false, Streams::ImageQ) => s.image.as_ref(),
                _ => s.point.as_ref(),
            }
            .expect("checked by Model::check_sample");
            let (v_pt, w) = self.local.attend(g, q, regions, None);
            attention.local = w;
            let local = Self::product(g, &self.fuse_q, q, &self.fuse_v, v_pt);
            match (&self.global, &self.fuse_q_all, &self.fuse_all) {
                (Some(scorer), Some(fq), Some(fa)) => {
                    let all = s.image.as_ref().expect("checked by Model::check_sample");
                    let (v_all, w) = scorer.attend(g, q, all, Some(v_pt));
                    attention.global = Some(w);
                    let global = Self::product(g, fq, q, fa, v_all);
                    g.concat_cols(&[local, global])
                }
                _ => local,
            }
        };
        let h = self.fc1.forward(g, fused);
        let h = g.relu(h);
        Forward { logits: self.fc2.forward(g, h), attention }
    }
}
