use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::BoundingBox;

pub(crate) fn random_regions(rng: &mut ChaCha8Rng, n: usize, valid: usize, width: usize) -> Regions {
    let mut rows = Mat::zeros((n, width));
    for r in 0..valid {
        for c in 0..width - 1 {
            rows[[r, c]] = rng.random_range(-1.0..1.0);
        }
    }
    let mask: Vec<bool> = (0..n).map(|i| i < valid).collect();
    let boxes = (0..n)
        .map(|i| if i < valid { BoundingBox { x: i as f64, y: 0.0, w: 5.0 + i as f64, h: 5.0 } } else { BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 } })
        .collect();
    Regions { rows, mask: Arc::from(mask), boxes }
}

pub(crate) fn tiny_config(arch: Architecture, streams: Streams) -> ModelConfig {
    let vocab = Vocabulary::build(["what color is this shirt", "how many of these are there"]);
    let mut c = ModelConfig::new(arch, streams, 3, vocab, vec!["a".into(), "b".into(), "c".into()]);
    c.d = 4;
    c.heads = 2;
    c.layers = 1;
    c.n_l = 1;
    c.n_img = 1;
    c.n_pt = 1;
    c.n_x = 1;
    c.seed = 5;
    c
}

pub(crate) fn sample(seed: u64, c: &ModelConfig, n: usize, valid: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = c.input_dim();
    Sample {
        tokens: vec![2, 3, 4],
        point: Some(random_regions(&mut rng, n, valid, w)),
        image: Some(random_regions(&mut rng, n + 1, valid + 1, w)),
    }
}

/// Moves every parameter (biases included) off its initialization so no
/// ReLU sits exactly at its kink.
pub(crate) fn perturb(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.value_mut(id).mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    }
}

pub(crate) fn model(c: &ModelConfig) -> Model {
    let mut m = Model::new(c.clone()).unwrap();
    perturb(&mut m, c.seed + 100);
    m
}
