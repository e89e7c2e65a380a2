//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is the tape: every operation appends one node holding its
//! forward value and the information its backward rule needs. Calling
//! [`Graph::backward`] on a `1 × 1` node walks the tape in exact reverse
//! order and accumulates gradients into every node that requires them.
//!
//! ```
//! use memdp::autodiff::Graph;
//! use memdp::tensor::Matrix;
//!
//! let mut g = Graph::new();
//! let x = g.param(Matrix::row_vector(vec![3.0]));
//! let y = g.add(x, x);
//! g.backward(y);
//! assert_eq!(g.grad(x).unwrap().as_slice(), &[2.0]);
//! ```
//!
//! Shape mismatches are programming errors and panic with a message naming
//! the operation and both shapes.

use crate::tensor::Matrix;

/// Layer-norm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Act(usize, Activation),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Matrix, inv_std: Vec<f64> },
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

#[cfg(test)]
thread_local! {
    /// Scales the `a` gradient of every matmul by this factor; used by
    /// mutation tests to prove the gradient checker catches broken rules.
    pub(crate) static CORRUPT_MATMUL: std::cell::Cell<f64> = const { std::cell::Cell::new(1.0) };
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that never records backward information.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    /// Toggles recording; returns the previous setting.
    pub fn set_grad_enabled(&mut self, enabled: bool) -> bool {
        std::mem::replace(&mut self.grad_enabled, enabled)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of records on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar: node is {:?}", m.shape());
        m.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient or zeros of the node's shape.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[v.0].value.shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, inputs: &[usize], op: impl FnOnce() -> Op) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value and records no backward rule: gradient stops here.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, &[a.0, b.0], || Op::MatMul(a.0, b.0))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, &[a.0, b.0], || Op::MatMulNt(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, &[a.0, b.0], || Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, &[a.0, b.0], || Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, &[a.0, b.0], || Op::Mul(a.0, b.0))
    }

    /// `x + 1·row`, broadcasting a `1 × n` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert!(
            rv.rows() == 1 && rv.cols() == xv.cols(),
            "add_row: row {:?} does not broadcast over {:?}",
            rv.shape(),
            xv.shape()
        );
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        self.push(value, &[x.0, row.0], || Op::AddRow(x.0, row.0))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, &[x.0], || Op::Scale(x.0, s))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).map(|v| act.apply(v));
        self.push(value, &[x.0], || Op::Act(x.0, act))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Gelu)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    ///
    /// Panics on NaN input.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            assert!(!row.iter().any(|v| v.is_nan()), "softmax_rows: NaN input");
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(value, &[x.0], || Op::SoftmaxRows(x.0))
    }

    /// Per-row normalisation to zero mean and unit (biased) variance,
    /// followed by the affine map `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        assert!(d >= 2, "layer_norm needs at least 2 columns, got {d}");
        let (gv, bv) = (self.value(gain), self.value(bias));
        assert!(
            gv.shape() == (1, d) && bv.shape() == (1, d),
            "layer_norm: gain {:?} / bias {:?} do not match width {d}",
            gv.shape(),
            bv.shape()
        );
        let mut xhat = Matrix::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut value = Matrix::zeros(xv.rows(), d);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            let out = value.row_mut(r);
            for c in 0..d {
                out[c] = xh[c] * gv.as_slice()[c] + bv.as_slice()[c];
            }
        }
        self.push(value, &[x.0, gain.0, bias.0], || Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Matrix::concat_rows(&mats);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(value, &idx.clone(), || Op::ConcatRows(idx))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_rows(start, len);
        self.push(value, &[x.0], || Op::SliceRows(x.0, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols: row mismatch {} vs {rows}", m.rows());
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(value, &idx.clone(), || Op::ConcatCols(idx))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols {start}..{} out of {}", start + len, xv.cols());
        let mut value = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(value, &[x.0], || Op::SliceCols(x.0, start))
    }

    /// Mean of squared elementwise differences, as a `1 × 1` node.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        p.assert_same_shape(t, "mse_loss");
        let n = p.len().max(1) as f64;
        let total: f64 = p.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Matrix::filled(1, 1, total / n);
        self.push(value, &[pred.0, target.0], || Op::Mse(pred.0, target.0))
    }

    /// Softmax attention weights `softmax(q kᵀ / √d + mask)`.
    pub fn attention_weights(&mut self, queries: Var, keys: Var, mask: Option<&Matrix>) -> Var {
        let d = self.value(queries).cols();
        assert!(d >= 1, "attention: zero width");
        assert!(self.value(keys).rows() >= 1, "attention: no keys");
        let scores = self.matmul_nt(queries, keys);
        let mut scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        if let Some(mask) = mask {
            let m = self.constant(mask.clone());
            scores = self.add(scores, m);
        }
        self.softmax_rows(scores)
    }

    /// `softmax(Q Kᵀ / √d) V`.
    ///
    /// Panics if there are no keys; callers keep their key sets non-empty.
    pub fn scaled_dot_attention(&mut self, queries: Var, keys: Var, values: Var) -> Var {
        let w = self.attention_weights(queries, keys, None);
        self.matmul(w, values)
    }

    /// Backpropagates from a `1 × 1` node, accumulating into every node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward: loss must be 1x1");
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(Matrix::filled(1, 1, 1.0));
        let mut contribs: Vec<(usize, Matrix)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            self.node_backward(i, &grad, &mut contribs);
            self.nodes[i].grad = Some(grad);
            for (j, g) in contribs.drain(..) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut self.nodes[j].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    fn node_backward(&self, i: usize, grad: &Matrix, out: &mut Vec<(usize, Matrix)>) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if needs(a) {
                    #[allow(unused_mut)]
                    let mut ga = grad.matmul_nt(val(b));
                    #[cfg(test)]
                    {
                        let k = CORRUPT_MATMUL.with(|c| c.get());
                        if k != 1.0 {
                            ga.scale_in_place(k);
                        }
                    }
                    out.push((a, ga));
                }
                if needs(b) {
                    out.push((b, val(a).matmul_tn(grad)));
                }
            }
            &Op::MatMulNt(a, b) => {
                // out = a bᵀ: ∂a = g b, ∂b = gᵀ a
                if needs(a) {
                    out.push((a, grad.matmul(val(b))));
                }
                if needs(b) {
                    out.push((b, grad.matmul_tn(val(a))));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, grad.clone()));
                out.push((b, grad.clone()));
            }
            &Op::Sub(a, b) => {
                out.push((a, grad.clone()));
                out.push((b, grad.map(|v| -v)));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, grad.zip_map(val(b), |g, y| g * y)));
                }
                if needs(b) {
                    out.push((b, grad.zip_map(val(a), |g, x| g * x)));
                }
            }
            &Op::AddRow(x, row) => {
                out.push((x, grad.clone()));
                if needs(row) {
                    let mut gr = Matrix::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (o, g) in gr.as_mut_slice().iter_mut().zip(grad.row(r)) {
                            *o += g;
                        }
                    }
                    out.push((row, gr));
                }
            }
            &Op::Scale(x, s) => out.push((x, grad.map(|g| g * s))),
            &Op::Act(x, act) => out.push((x, grad.zip_map(val(x), |g, v| g * act.derivative(v)))),
            &Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), grad.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                out.push((x, gx));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = xhat.cols();
                let gv = val(gain).as_slice();
                if needs(gain) || needs(bias) {
                    let mut gg = Matrix::zeros(1, d);
                    let mut gb = Matrix::zeros(1, d);
                    for r in 0..grad.rows() {
                        for c in 0..d {
                            gg.as_mut_slice()[c] += grad.get(r, c) * xhat.get(r, c);
                            gb.as_mut_slice()[c] += grad.get(r, c);
                        }
                    }
                    out.push((gain, gg));
                    out.push((bias, gb));
                }
                if needs(x) {
                    let mut gx = Matrix::zeros(grad.rows(), d);
                    let df = d as f64;
                    for r in 0..grad.rows() {
                        let xh = xhat.row(r);
                        let dxh: Vec<f64> = grad.row(r).iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv / df * (df * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh);
                        }
                    }
                    out.push((x, gx));
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if needs(p) {
                        out.push((p, grad.slice_rows(start, rows)));
                    }
                    start += rows;
                }
            }
            &Op::SliceRows(x, start) => {
                let xv = val(x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                let w = xv.cols();
                gx.as_mut_slice()[start * w..start * w + grad.len()].copy_from_slice(grad.as_slice());
                out.push((x, gx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if needs(p) {
                        let mut gp = Matrix::zeros(grad.rows(), cols);
                        for r in 0..grad.rows() {
                            gp.row_mut(r).copy_from_slice(&grad.row(r)[offset..offset + cols]);
                        }
                        out.push((p, gp));
                    }
                    offset += cols;
                }
            }
            &Op::SliceCols(x, start) => {
                let xv = val(x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..grad.rows() {
                    gx.row_mut(r)[start..start + grad.cols()].copy_from_slice(grad.row(r));
                }
                out.push((x, gx));
            }
            &Op::Mse(p, t) => {
                let g = grad.get(0, 0);
                let n = val(p).len().max(1) as f64;
                let diff = val(p).zip_map(val(t), |a, b| 2.0 * (a - b) / n * g);
                if needs(t) {
                    out.push((t, diff.map(|v| -v)));
                }
                out.push((p, diff));
            }
        }
    }
}
