//! Cross-modality encoder with a point stream.
//!
//! Each stream first runs its own self-attention layers (`N_L` for the
//! question, `N_Img`, `N_Pt` for the visual streams). Then `N_X`
//! cross-modality layers update all streams at once: every stream
//! cross-attends to the concatenation of the other streams' current states,
//! then applies self-attention and a feed-forward sublayer. The answer is
//! read from the first (`<cls>`) language position.

use std::sync::Arc;

use super::{positional, renormalized, AttentionRecord, Forward, ModelConfig, Regions, Sample, Streams, CLS};
use crate::nn::layers::{AttentionSublayer, EncoderBlock, FeedForwardSublayer, LayerNorm, Linear};
use crate::nn::{Graph, Mat, ParamStore, Var};

struct CrossLayer {
    cross: AttentionSublayer,
    sa: AttentionSublayer,
    ff: FeedForwardSublayer,
}

impl CrossLayer {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Self {
        Self {
            cross: AttentionSublayer::new(store, &format!("{name}.cross"), d, heads),
            sa: AttentionSublayer::new(store, &format!("{name}.sa"), d, heads),
            ff: FeedForwardSublayer::new(store, &format!("{name}.ffn"), d),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mask: &Arc<[bool]>, ctx: Var, ctx_mask: &Arc<[bool]>) -> (Var, Mat) {
        let (x, w) = self.cross.forward(g, x, ctx, ctx_mask);
        let (x, _) = self.sa.forward(g, x, x, mask);
        (self.ff.forward(g, x), w)
    }
}

struct Stream {
    proj: Option<super::RegionEmbedding>,
    self_layers: Vec<EncoderBlock>,
    cross_layers: Vec<CrossLayer>,
}

impl Stream {
    fn new(store: &mut ParamStore, name: &str, c: &ModelConfig, depth: usize, visual: bool, cross: bool) -> Self {
        Self {
            proj: visual.then(|| super::RegionEmbedding::new(store, &format!("{name}.embed"), c)),
            self_layers: (0..depth).map(|l| EncoderBlock::new(store, &format!("{name}.self{l}"), c.d, c.heads)).collect(),
            cross_layers: if cross {
                (0..c.n_x).map(|l| CrossLayer::new(store, &format!("{name}.x{l}"), c.d, c.heads)).collect()
            } else {
                Vec::new()
            },
        }
    }

    fn encode(&self, g: &mut Graph, mut x: Var, mask: &Arc<[bool]>) -> Var {
        if let Some(p) = &self.proj {
            x = p.forward(g, x);
        }
        for l in &self.self_layers {
            x = l.forward(g, x, x, mask).0;
        }
        x
    }
}

struct State {
    x: Var,
    mask: Arc<[bool]>,
}

pub struct Lxmert {
    streams: Streams,
    embed: crate::nn::layers::Embedding,
    lang: Stream,
    visual: Option<Stream>,
    image: Option<Stream>,
    pooler: Linear,
    head_ln: LayerNorm,
    classifier: Linear,
    d: usize,
}

impl Lxmert {
    pub fn new(store: &mut ParamStore, c: &ModelConfig) -> Self {
        let d = c.d;
        let has_visual = c.streams != Streams::QOnly;
        let three = c.streams == Streams::ThreeStream;
        // the single visual stream is the point stream when one exists
        let visual_depth = if c.streams == Streams::ImageQ { c.n_img } else { c.n_pt };
        Self {
            streams: c.streams,
            embed: crate::nn::layers::Embedding::new(store, "q.embed", c.vocab.len(), d),
            lang: Stream::new(store, "lang", c, c.n_l, false, has_visual),
            visual: has_visual.then(|| Stream::new(store, "visual", c, visual_depth, true, true)),
            image: three.then(|| Stream::new(store, "image", c, c.n_img, true, true)),
            pooler: Linear::new(store, "pool", d, d),
            head_ln: LayerNorm::new(store, "cls.ln", d),
            classifier: Linear::new(store, "cls", d, c.answers.len()),
            d,
        }
    }

    fn concat_states(g: &mut Graph, parts: &[&State]) -> State {
        let xs: Vec<Var> = parts.iter().map(|s| s.x).collect();
        let x = if xs.len() == 1 { xs[0] } else { g.concat_rows(&xs) };
        let mask: Vec<bool> = parts.iter().flat_map(|s| s.mask.iter().copied()).collect();
        State { x, mask: mask.into() }
    }

    pub(crate) fn forward(&self, g: &mut Graph, s: &Sample) -> Forward {
        let mut tokens = Vec::with_capacity(s.tokens.len() + 1);
        tokens.push(CLS);
        tokens.extend_from_slice(&s.tokens);
        let e = self.embed.forward(g, &tokens);
        let pos = g.input(positional(tokens.len(), self.d));
        let x = g.add(e, pos);
        let lang_mask: Arc<[bool]> = Arc::from(vec![true; tokens.len()]);
        let mut lang = State { x: self.lang.encode(g, x, &lang_mask), mask: lang_mask };
        let mut attention = AttentionRecord::default();

        let visual_regions: Option<Regions> = match self.streams {
            Streams::QOnly => None,
            Streams::ImageQ => s.image.clone(),
            Streams::PointQ | Streams::ThreeStream => s.point.clone(),
            Streams::TwoStream => Some(Regions::concat(s.image.as_ref().expect("checked"), s.point.as_ref().expect("checked"))),
        };
        let mut visual = match (&self.visual, &visual_regions) {
            (Some(stream), Some(r)) => {
                let rows = g.input(r.rows.clone());
                Some(State { x: stream.encode(g, rows, &r.mask), mask: Arc::clone(&r.mask) })
            }
            _ => None,
        };
        let mut image = match (&self.image, &s.image) {
            (Some(stream), Some(r)) => {
                let rows = g.input(r.rows.clone());
                Some(State { x: stream.encode(g, rows, &r.mask), mask: Arc::clone(&r.mask) })
            }
            _ => None,
        };

        let mut per_layer = Vec::new();
        let mut last_lang_weights = None;
        for l in 0..self.lang.cross_layers.len() {
            let (Some(vis), Some(vis_stream)) = (&visual, &self.visual) else { break };
            let others_of_lang: Vec<&State> = [Some(vis), image.as_ref()].into_iter().flatten().collect();
            let ctx = Self::concat_states(g, &others_of_lang);
            let (new_lang, wl) = self.lang.cross_layers[l].forward(g, lang.x, &lang.mask, ctx.x, &ctx.mask);

            let others_of_vis: Vec<&State> = [Some(&lang), image.as_ref()].into_iter().flatten().collect();
            let ctx = Self::concat_states(g, &others_of_vis);
            let (new_vis, wv) = vis_stream.cross_layers[l].forward(g, vis.x, &vis.mask, ctx.x, &ctx.mask);

            let new_img = match (&image, &self.image) {
                (Some(img), Some(img_stream)) => {
                    let ctx = Self::concat_states(g, &[&lang, vis]);
                    let (x, wi) = img_stream.cross_layers[l].forward(g, img.x, &img.mask, ctx.x, &ctx.mask);
                    per_layer.push(super::matrix_rows(&wi));
                    Some(State { x, mask: Arc::clone(&img.mask) })
                }
                _ => None,
            };
            per_layer.push(super::matrix_rows(&wl));
            per_layer.push(super::matrix_rows(&wv));
            last_lang_weights = Some(wl.row(0).to_vec());
            lang = State { x: new_lang, mask: Arc::clone(&lang.mask) };
            visual = Some(State { x: new_vis, mask: Arc::clone(&vis.mask) });
            image = new_img;
        }

        // <cls> attention over the visual context of the last cross layer
        if let Some(w) = last_lang_weights {
            let n_vis = visual_regions.as_ref().map_or(0, |r| r.mask.len());
            match self.streams {
                Streams::ThreeStream => {
                    attention.local = renormalized(&w[..n_vis]);
                    attention.global = Some(renormalized(&w[n_vis..]));
                }
                Streams::TwoStream => {
                    let n_img = s.image.as_ref().map_or(0, |r| r.mask.len());
                    attention.global = Some(renormalized(&w[..n_img]));
                    attention.local = renormalized(&w[n_img..]);
                }
                _ => attention.local = w,
            }
            attention.per_layer = Some(per_layer);
        }

        let cls = g.slice_rows(lang.x, 0, 1);
        let pooled = self.pooler.forward(g, cls);
        let pooled = g.tanh(pooled);
        let h = self.head_ln.forward(g, pooled);
        Forward { logits: self.classifier.forward(g, h), attention }
    }
}
