//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Vectors are
//! `1 × d` rows. Shape errors are programming errors and panic; contract
//! checks (empty inputs, fully masked streams) belong to the callers.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Axis};

use super::{Mat, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MaskedSoftmax(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Row-wise normalization; caches `xhat` and the inverse std per row.
    LayerNorm(Var, Mat, Array1<f64>),
    /// Scalar negative log-likelihood of a `1 × C` logit row; caches softmax.
    CrossEntropy(Var, usize, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every parameter that took part.
pub struct Gradients {
    pub by_param: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_nodes: HashMap::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    /// Row-wise softmax over the columns whose mask entry is true. Masked
    /// columns get exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<[bool]>) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), mask.len(), "mask length mismatch");
        assert!(mask.iter().any(|m| *m), "softmax over a fully masked row");
        let mut value = Mat::zeros(x.dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            let max = row.iter().zip(mask.iter()).filter(|(_, m)| **m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (c, (&v, &m)) in row.iter().zip(mask.iter()).enumerate() {
                if m {
                    let e = (v - max).exp();
                    value[[r, c]] = e;
                    total += e;
                }
            }
            value.row_mut(r).mapv_inplace(|e| e / total);
        }
        self.push(value, Op::MaskedSoftmax(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut xhat = Mat::zeros(x.dim());
        let mut inv = Array1::zeros(x.nrows());
        for (r, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv[r] = inv_std;
            xhat.row_mut(r).assign(&row.mapv(|v| (v - mean) * inv_std));
        }
        self.push(xhat.clone(), Op::LayerNorm(a, xhat, inv))
    }

    /// `-log softmax(logits)[target]` for a `1 × C` row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let probs = softmax_row(self.value(logits));
        let p = probs[[0, target]];
        // f64::max drops NaN, so clamp only real probabilities
        let loss = if p.is_nan() { f64::NAN } else { -p.max(f64::MIN_POSITIVE).ln() };
        self.push(Mat::from_elem((1, 1), loss), Op::CrossEntropy(logits, target, probs))
    }

    /// Back-propagates from a `1 × 1` node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        let mut by_param: Vec<Option<Mat>> = vec![None; self.params.len()];

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => by_param[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * self.value(*row);
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, y)| d * y).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + cols]).to_owned());
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, xhat, inv) => {
                    let n = xhat.ncols() as f64;
                    let mut ga = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let sum_g = gr.sum();
                        let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for c in 0..xhat.ncols() {
                            ga[[r, c]] = inv[r] / n * (n * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, target, probs) => {
                    let mut ga = probs.clone();
                    ga[[0, *target]] -= 1.0;
                    acc(&mut grads, *a, ga * g[[0, 0]]);
                }
            }
        }
        Gradients { by_param }
    }
}

/// Numerically stable softmax of a single row.
pub fn softmax_row(x: &Mat) -> Mat {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = x.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}
