//! Minimal differentiable building blocks: a parameter store, a tape
//! ([`graph::Graph`]), layers, and AdaMax/Adam optimizers.
//!
//! Everything runs in `f64` so finite-difference gradient checks are
//! meaningful. Checkpoints narrow to `f32` on disk.

pub mod graph;
pub mod layers;
pub mod optim;

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use graph::{Gradients, Graph, Var};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors in creation order. Creation order is the
/// canonical order for optimizers and checkpoints.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Registers a tensor. Panics on a duplicate name, which is always a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// `rows × cols` weights drawn from `U(-1/√rows, 1/√rows)`.
    pub fn fan_in(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, bound: f64) -> ParamId {
        let value = Mat::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::ones((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Accumulates per-example gradients in a fixed order.
pub fn sum_gradients(into: &mut Vec<Option<Mat>>, grads: Gradients) {
    if into.len() < grads.by_param.len() {
        into.resize(grads.by_param.len(), None);
    }
    for (slot, g) in into.iter_mut().zip(grads.by_param) {
        match (slot.as_mut(), g) {
            (Some(acc), Some(g)) => *acc += &g,
            (None, Some(g)) => *slot = Some(g),
            _ => {}
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Checks analytic gradients of every parameter against central
    /// differences (eps 1e-5, relative tolerance 1e-4).
    pub(crate) fn assert_gradients(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> (f64, Gradients)) {
        let worst = max_gradient_error(store, f);
        assert!(worst.0 <= 1e-4, "relative gradient error {} at {}", worst.0, worst.1);
    }

    pub(crate) fn max_gradient_error(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> (f64, Gradients)) -> (f64, String) {
        let (_, grads) = f(store);
        let eps = 1e-5;
        let mut worst = (0.0, String::new());
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(store.value(id).dim()));
            let (rows, cols) = analytic.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = store.value(id)[[r, c]];
                    store.value_mut(id)[[r, c]] = orig + eps;
                    let up = f(store).0;
                    store.value_mut(id)[[r, c]] = orig - eps;
                    let down = f(store).0;
                    store.value_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let a = analytic[[r, c]];
                    let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                    if err > worst.0 {
                        worst = (err, format!("{}[{r},{c}] analytic {a} numeric {numeric}", store.name(id)));
                    }
                }
            }
        }
        worst
    }
}
