//! Modular co-attention with a point stream.
//!
//! The question passes through `L` self-attention blocks. The point stream
//! runs `L` blocks of self-attention, guided attention over the final
//! question states, and a feed-forward sublayer. In the three-stream
//! variant the image stream's guided attention reads the concatenation of
//! the final question states and the point stream at the same depth. Each
//! stream is pooled by a learned single-query attention and fused as
//! `z1 = LN(W1 q + W2 p)`, `z2 = LN(W1 q + W3 v)`, `z = z1 ⊕ z2`.
//!
//! Single-visual-stream variants (`image_q`, `point_q`, `two_stream`) share
//! one set of visual weights, so `point_q` fed full-image regions computes
//! exactly what `image_q` computes.

use std::sync::Arc;

use super::{positional, renormalized, AttentionRecord, Forward, ModelConfig, Regions, Sample, Streams};
use crate::nn::layers::{AttFlat, AttentionSublayer, EncoderBlock, FeedForwardSublayer, LayerNorm, Linear};
use crate::nn::{Graph, Mat, ParamStore, Var};

/// Self-attention, guided attention, feed-forward.
struct SgaBlock {
    sa: AttentionSublayer,
    ga: AttentionSublayer,
    ff: FeedForwardSublayer,
}

impl SgaBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Self {
        Self {
            sa: AttentionSublayer::new(store, &format!("{name}.sa"), d, heads),
            ga: AttentionSublayer::new(store, &format!("{name}.ga"), d, heads),
            ff: FeedForwardSublayer::new(store, &format!("{name}.ffn"), d),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mask: &Arc<[bool]>, ctx: Var, ctx_mask: &Arc<[bool]>) -> (Var, Mat) {
        let (x, _) = self.sa.forward(g, x, x, mask);
        let (x, w) = self.ga.forward(g, x, ctx, ctx_mask);
        (self.ff.forward(g, x), w)
    }
}

struct VisualStream {
    proj: super::RegionEmbedding,
    blocks: Vec<SgaBlock>,
    pool: AttFlat,
    fuse: Linear,
}

impl VisualStream {
    fn new(store: &mut ParamStore, name: &str, c: &ModelConfig) -> Self {
        Self {
            proj: super::RegionEmbedding::new(store, &format!("{name}.embed"), c),
            blocks: (0..c.layers).map(|l| SgaBlock::new(store, &format!("{name}.dec{l}"), c.d, c.heads)).collect(),
            pool: AttFlat::new(store, &format!("{name}.pool"), c.d),
            fuse: Linear::new(store, &format!("{name}.fuse"), c.d, c.d),
        }
    }
}

pub struct Mcan {
    streams: Streams,
    embed: crate::nn::layers::Embedding,
    encoder: Vec<EncoderBlock>,
    q_pool: AttFlat,
    q_fuse: Linear,
    /// The point stream, or the only visual stream in two-input variants.
    visual: Option<VisualStream>,
    /// The image stream of the three-stream variant.
    image: Option<VisualStream>,
    norm1: LayerNorm,
    norm2: Option<LayerNorm>,
    classifier: Linear,
    d: usize,
}

impl Mcan {
    pub fn new(store: &mut ParamStore, c: &ModelConfig) -> Self {
        let d = c.d;
        let three = c.streams == Streams::ThreeStream;
        let single = c.streams != Streams::QOnly;
        Self {
            streams: c.streams,
            embed: crate::nn::layers::Embedding::new(store, "q.embed", c.vocab.len(), d),
            encoder: (0..c.layers).map(|l| EncoderBlock::new(store, &format!("q.enc{l}"), d, c.heads)).collect(),
            q_pool: AttFlat::new(store, "q.pool", d),
            q_fuse: Linear::new(store, "q.fuse", d, d),
            visual: single.then(|| VisualStream::new(store, "visual", c)),
            image: three.then(|| VisualStream::new(store, "image", c)),
            norm1: LayerNorm::new(store, "fuse.ln1", d),
            norm2: three.then(|| LayerNorm::new(store, "fuse.ln2", d)),
            classifier: Linear::new(store, "cls", if three { 2 * d } else { d }, c.answers.len()),
            d,
        }
    }

    /// Token states after `L` self-attention blocks, `T × d`.
    pub(crate) fn encode_question(&self, g: &mut Graph, tokens: &[usize]) -> (Var, Arc<[bool]>) {
        let e = self.embed.forward(g, tokens);
        let pos = g.input(positional(tokens.len(), self.d));
        let mut x = g.add(e, pos);
        let mask: Arc<[bool]> = Arc::from(vec![true; tokens.len()]);
        for block in &self.encoder {
            x = block.forward(g, x, x, &mask).0;
        }
        (x, mask)
    }

    pub(crate) fn forward(&self, g: &mut Graph, s: &Sample) -> Forward {
        let (q, q_mask) = self.encode_question(g, &s.tokens);
        let (q_vec, _) = self.q_pool.forward(g, q, &q_mask);
        let wq = self.q_fuse.forward(g, q_vec);
        let mut attention = AttentionRecord::default();
        let mut per_layer = Vec::new();

        let Some(visual) = &self.visual else {
            let z = self.norm1.forward(g, wq);
            return Forward { logits: self.classifier.forward(g, z), attention };
        };

        let single: Regions = match self.streams {
            Streams::ImageQ => s.image.clone().expect("checked"),
            Streams::PointQ | Streams::ThreeStream => s.point.clone().expect("checked"),
            Streams::TwoStream => Regions::concat(s.image.as_ref().expect("checked"), s.point.as_ref().expect("checked")),
            Streams::QOnly => unreachable!(),
        };
        let rows = g.input(single.rows.clone());
        let mut p = visual.proj.forward(g, rows);
        let mut p_layers = Vec::with_capacity(visual.blocks.len());
        for block in &visual.blocks {
            let (x, w) = block.forward(g, p, &single.mask, q, &q_mask);
            per_layer.push(super::matrix_rows(&w));
            p = x;
            p_layers.push(p);
        }
        let (p_vec, pw) = visual.pool.forward(g, p, &single.mask);
        let n_image = s.image.as_ref().map_or(0, |r| r.mask.len());
        attention.local = match self.streams {
            // image rows first, then point rows
            Streams::TwoStream => {
                attention.global = Some(renormalized(&pw[..n_image]));
                renormalized(&pw[n_image..])
            }
            _ => pw,
        };
        let wp = visual.fuse.forward(g, p_vec);
        let z1 = g.add(wq, wp);
        let z1 = self.norm1.forward(g, z1);

        let z = match (&self.image, &self.norm2) {
            (Some(image), Some(norm2)) => {
                let img = s.image.as_ref().expect("checked");
                let rows = g.input(img.rows.clone());
                let mut v = image.proj.forward(g, rows);
                let ctx_mask: Arc<[bool]> = q_mask.iter().chain(single.mask.iter()).copied().collect::<Vec<_>>().into();
                for (block, p_l) in image.blocks.iter().zip(&p_layers) {
                    let ctx = g.concat_rows(&[q, *p_l]);
                    let (x, w) = block.forward(g, v, &img.mask, ctx, &ctx_mask);
                    per_layer.push(super::matrix_rows(&w));
                    v = x;
                }
                let (v_vec, vw) = image.pool.forward(g, v, &img.mask);
                attention.global = Some(vw);
                let wv = image.fuse.forward(g, v_vec);
                let z2 = g.add(wq, wv);
                let z2 = norm2.forward(g, z2);
                g.concat_cols(&[z1, z2])
            }
            _ => z1,
        };
        attention.per_layer = Some(per_layer);
        Forward { logits: self.classifier.forward(g, z), attention }
    }
}
