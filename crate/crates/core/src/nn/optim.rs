//! First-order optimizers with an optional warmup/decay schedule.

use serde::{Deserialize, Serialize};

use super::{Mat, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamax,
    Adam,
}

/// Linear warmup over the first 10% of iterations to the base rate, then
/// linear decay to 10% of base at `max_iterations`.
pub fn scheduled_rate(base: f64, iteration: usize, max_iterations: usize, schedule: bool) -> f64 {
    if !schedule || max_iterations == 0 {
        return base;
    }
    let warmup = (max_iterations / 10).max(1);
    let it = iteration.min(max_iterations);
    if it < warmup {
        base * (it + 1) as f64 / warmup as f64
    } else {
        let span = (max_iterations - warmup).max(1) as f64;
        let progress = (it - warmup) as f64 / span;
        base * (1.0 - 0.9 * progress)
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| Mat::zeros(params.value(id).dim())).collect::<Vec<_>>();
        Self { kind, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(Some(g)) = grads.get(id.0) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let w = params.value_mut(id);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                match self.kind {
                    OptimizerKind::Adam => {
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
                    }
                    OptimizerKind::Adamax => {
                        *v = (b2 * *v).max(g.abs());
                        *w -= lr / bias1 * *m / (*v + eps);
                    }
                }
            });
        }
    }
}
