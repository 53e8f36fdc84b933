//! Tape-based reverse-mode automatic differentiation over dense rank-1/rank-2
//! arrays.
//!
//! A [`Tape`] records every operation performed through it; [`Tape::backward`]
//! replays the records in reverse and accumulates gradients into the
//! participating [`Tensor`]s. Tensors are cheap handles (shared value and
//! gradient buffers), so parameters created once can be reused across many
//! tapes: each training step records on a fresh tape while the parameter
//! buffers persist.
//!
//! Everything is double precision. Rank-1 data is represented as a `1 x n`
//! matrix; there is no broadcasting.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense real matrix with a value buffer and a same-shaped gradient buffer.
///
/// Cloning a `Tensor` clones the handle, not the storage: clones observe each
/// other's values and gradients. The gradient buffer is all-zero at creation
/// and after [`Tensor::zero_grad`].
#[derive(Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    node_id: Option<usize>,
    values: Rc<RefCell<Vec<f64>>>,
    grad: Rc<RefCell<Vec<f64>>>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, vec![0.0; rows * cols]).expect("length matches shape")
    }

    /// 1x1 tensor.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v]).expect("length matches shape")
    }

    /// 1xn tensor.
    pub fn row(values: &[f64]) -> Tensor {
        Tensor::from_vec(1, values.len(), values.to_vec()).expect("length matches shape")
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        if values.len() != rows * cols {
            return Err(Error::InvalidConfig(format!(
                "tensor data length {} does not match shape {}x{}",
                values.len(),
                rows,
                cols
            )));
        }
        let n = values.len();
        Ok(Tensor {
            rows,
            cols,
            node_id: None,
            values: Rc::new(RefCell::new(values)),
            grad: Rc::new(RefCell::new(vec![0.0; n])),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Tape node index if this tensor is an operation output.
    pub fn node_id(&self) -> Option<usize> {
        self.node_id
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on a {}x{} tensor", self.rows, self.cols);
        self.values.borrow()[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values.borrow()[r * self.cols + c]
    }

    pub fn set(&self, r: usize, c: usize, v: f64) {
        self.values.borrow_mut()[r * self.cols + c] = v;
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        self.values.borrow()[i]
    }

    pub fn set_flat(&self, i: usize, v: f64) {
        self.values.borrow_mut()[i] = v;
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.borrow().clone()
    }

    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot assign {} values to a {}x{} tensor",
                values.len(),
                self.rows,
                self.cols
            )));
        }
        self.values.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad_vec(&self) -> Vec<f64> {
        self.grad.borrow().clone()
    }

    pub fn grad_at(&self, r: usize, c: usize) -> f64 {
        self.grad.borrow()[r * self.cols + c]
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().fill(0.0);
    }

    pub fn scale_grad(&self, factor: f64) {
        for g in self.grad.borrow_mut().iter_mut() {
            *g *= factor;
        }
    }

    /// Independent copy: fresh value and gradient storage.
    pub fn deep_clone(&self) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.to_vec()).expect("shape preserved")
    }

    /// Handle identity (same underlying buffers).
    pub fn same_storage(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.values, &b.values)
    }

    fn with_node(mut self, id: usize) -> Tensor {
        self.node_id = Some(id);
        self
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.rows, self.cols))
            .field("values", &self.values.borrow())
            .finish()
    }
}

/// Zero the gradients of every tensor in the slice.
pub fn zero_grads(tensors: &[Tensor]) {
    for t in tensors {
        t.zero_grad();
    }
}

struct Node {
    back: Box<dyn Fn()>,
}

/// Records operations for one forward pass; replays them in reverse on
/// [`Tape::backward`]. A tape and the tensors flowing through it are confined
/// to a single thread; independent tapes can run on independent threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record(&self, back: impl Fn() + 'static) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { back: Box::new(back) });
        nodes.len() - 1
    }

    /// Standard matrix product `a[m x k] * b[k x n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.shape();
        let (k2, n) = b.shape();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = a.values.borrow();
            let bv = b.values.borrow();
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        let out = Tensor::from_vec(m, n, out)?;
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow();
            {
                // a.grad += go * b^T
                let bv = b2.values.borrow();
                let mut ga = a2.grad.borrow_mut();
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += go[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            {
                // b.grad += a^T * go
                let av = a2.values.borrow();
                let mut gb = b2.grad.borrow_mut();
                for p in 0..k {
                    for i in 0..m {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += x * go[i * n + j];
                        }
                    }
                }
            }
        });
        Ok(out.with_node(id))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.pointwise_binary("add", a, b, |x, y| x + y, |_x, _y| (1.0, 1.0))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.pointwise_binary("sub", a, b, |x, y| x - y, |_x, _y| (1.0, -1.0))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.pointwise_binary("hadamard", a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn pointwise_binary(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out: Vec<f64> = {
            let av = a.values.borrow();
            let bv = b.values.borrow();
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = Tensor::from_vec(a.rows, a.cols, out)?;
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let derivs: Vec<(f64, f64)> = {
                let av = a2.values.borrow();
                let bv = b2.values.borrow();
                av.iter().zip(bv.iter()).map(|(&x, &y)| df(x, y)).collect()
            };
            {
                let mut ga = a2.grad.borrow_mut();
                for (i, g) in ga.iter_mut().enumerate() {
                    *g += go[i] * derivs[i].0;
                }
            }
            {
                let mut gb = b2.grad.borrow_mut();
                for (i, g) in gb.iter_mut().enumerate() {
                    *g += go[i] * derivs[i].1;
                }
            }
        });
        Ok(out.with_node(id))
    }

    /// Concatenate along the feature (column) axis. All parts must share the
    /// same row count; the output width is the sum of part widths.
    pub fn concat(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let rows = parts[0].rows;
        for p in parts {
            if p.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for p in parts {
            let pv = p.values.borrow();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + p.cols]
                    .copy_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
            }
            offset += p.cols;
        }
        let out = Tensor::from_vec(rows, total, out)?;
        let parts2: Vec<Tensor> = parts.to_vec();
        let o2 = out.clone();
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let mut offset = 0;
            for p in &parts2 {
                {
                    let mut gp = p.grad.borrow_mut();
                    for r in 0..rows {
                        for c in 0..p.cols {
                            gp[r * p.cols + c] += go[r * total + offset + c];
                        }
                    }
                }
                offset += p.cols;
            }
        });
        Ok(out.with_node(id))
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        // derivative from the output: y(1 - y)
        self.pointwise_unary(x, sigmoid_scalar, |_x, y| y * (1.0 - y))
    }

    pub fn tanh(&self, x: &Tensor) -> Tensor {
        self.pointwise_unary(x, f64::tanh, |_x, y| 1.0 - y * y)
    }

    /// Exact GELU, `x * phi(x)` with the Gaussian CDF `phi`.
    pub fn gelu(&self, x: &Tensor) -> Tensor {
        self.pointwise_unary(x, gelu_scalar, |x, _y| gelu_derivative(x))
    }

    fn pointwise_unary(
        &self,
        x: &Tensor,
        f: fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Tensor {
        let out: Vec<f64> = x.values.borrow().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(x.rows, x.cols, out).expect("shape preserved");
        let (x2, o2) = (x.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let derivs: Vec<f64> = {
                let xv = x2.values.borrow();
                let ov = o2.values.borrow();
                xv.iter().zip(ov.iter()).map(|(&x, &y)| df(x, y)).collect()
            };
            let mut gx = x2.grad.borrow_mut();
            for (i, g) in gx.iter_mut().enumerate() {
                *g += go[i] * derivs[i];
            }
        });
        out.with_node(id)
    }

    /// `1 - x`, pointwise.
    pub fn one_minus(&self, x: &Tensor) -> Tensor {
        self.pointwise_unary(x, |v| 1.0 - v, |_x, _y| -1.0)
    }

    /// Multiply by a constant.
    pub fn scale(&self, x: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = x.values.borrow().iter().map(|&v| c * v).collect();
        let out = Tensor::from_vec(x.rows, x.cols, out).expect("shape preserved");
        let (x2, o2) = (x.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let mut gx = x2.grad.borrow_mut();
            for (i, g) in gx.iter_mut().enumerate() {
                *g += c * go[i];
            }
        });
        out.with_node(id)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s: f64 = x.values.borrow().iter().sum();
        let out = Tensor::scalar(s);
        let (x2, o2) = (x.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow()[0];
            let mut gx = x2.grad.borrow_mut();
            for g in gx.iter_mut() {
                *g += go;
            }
        });
        out.with_node(id)
    }

    /// Numerically stable softmax over a `1 x n` tensor: outputs are positive
    /// and sum to one, invariant to adding a constant to every input.
    pub fn softmax(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows != 1 || x.cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: x.shape(),
                rhs: (1, 1.max(x.cols)),
            });
        }
        let out: Vec<f64> = {
            let xv = x.values.borrow();
            softmax_slice(&xv)
        };
        let out = Tensor::from_vec(1, x.cols, out)?;
        let (x2, o2) = (x.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let ov = o2.values.borrow();
            let dot: f64 = go.iter().zip(ov.iter()).map(|(&g, &s)| g * s).sum();
            let mut gx = x2.grad.borrow_mut();
            for i in 0..gx.len() {
                gx[i] += ov[i] * (go[i] - dot);
            }
        });
        Ok(out.with_node(id))
    }

    /// Softmax applied independently down each column of an `n x d` tensor,
    /// so each column sums to one across the rows.
    pub fn col_softmax(&self, x: &Tensor) -> Tensor {
        let (n, d) = x.shape();
        let mut out = vec![0.0; n * d];
        {
            let xv = x.values.borrow();
            for j in 0..d {
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    max = max.max(xv[i * d + j]);
                }
                let mut denom = 0.0;
                for i in 0..n {
                    let e = (xv[i * d + j] - max).exp();
                    out[i * d + j] = e;
                    denom += e;
                }
                for i in 0..n {
                    out[i * d + j] /= denom;
                }
            }
        }
        let out = Tensor::from_vec(n, d, out).expect("shape preserved");
        let (x2, o2) = (x.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let ov = o2.values.borrow();
            let mut gx = x2.grad.borrow_mut();
            for j in 0..d {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += go[i * d + j] * ov[i * d + j];
                }
                for i in 0..n {
                    gx[i * d + j] += ov[i * d + j] * (go[i * d + j] - dot);
                }
            }
        });
        out.with_node(id)
    }

    /// `ln(max(probs[idx], 1e-12))` as a scalar. Gradient flows into the
    /// picked component only; the clamp region is flat.
    pub fn log_pick(&self, probs: &Tensor, idx: usize) -> Result<Tensor> {
        if probs.rows != 1 {
            return Err(Error::ShapeMismatch {
                op: "log_pick",
                lhs: probs.shape(),
                rhs: (1, probs.cols),
            });
        }
        if idx >= probs.cols {
            return Err(Error::IndexOutOfRange {
                what: "log_pick",
                index: idx,
                len: probs.cols,
            });
        }
        let p = probs.values.borrow()[idx];
        let out = Tensor::scalar(p.max(LOG_CLAMP).ln());
        let (p2, o2) = (probs.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow()[0];
            let p = p2.values.borrow()[idx];
            if p >= LOG_CLAMP {
                p2.grad.borrow_mut()[idx] += go / p;
            }
        });
        Ok(out.with_node(id))
    }

    /// Select one row of `table` as a `1 x cols` tensor; the gradient
    /// accumulates into that row only.
    pub fn lookup_row(&self, table: &Tensor, idx: usize) -> Result<Tensor> {
        if idx >= table.rows {
            return Err(Error::IndexOutOfRange {
                what: "row lookup",
                index: idx,
                len: table.rows,
            });
        }
        let cols = table.cols;
        let row: Vec<f64> = table.values.borrow()[idx * cols..(idx + 1) * cols].to_vec();
        let out = Tensor::from_vec(1, cols, row)?;
        let (t2, o2) = (table.clone(), out.clone());
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let mut gt = t2.grad.borrow_mut();
            for c in 0..cols {
                gt[idx * cols + c] += go[c];
            }
        });
        Ok(out.with_node(id))
    }

    /// `sum_i w[0][i] * parts[i]` where `w` is `1 x n` and every part is
    /// `1 x d`. Differentiable in the weights and the parts.
    pub fn weighted_sum(&self, w: &Tensor, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("weighted_sum"));
        }
        if w.rows != 1 || w.cols != parts.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: w.shape(),
                rhs: (1, parts.len()),
            });
        }
        let d = parts[0].cols;
        for p in parts {
            if p.shape() != (1, d) {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let mut out = vec![0.0; d];
        {
            let wv = w.values.borrow();
            for (i, p) in parts.iter().enumerate() {
                let pv = p.values.borrow();
                for j in 0..d {
                    out[j] += wv[i] * pv[j];
                }
            }
        }
        let out = Tensor::from_vec(1, d, out)?;
        let (w2, o2) = (w.clone(), out.clone());
        let parts2: Vec<Tensor> = parts.to_vec();
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let wv = w2.values.borrow().clone();
            for (i, p) in parts2.iter().enumerate() {
                let dot: f64 = {
                    let pv = p.values.borrow();
                    go.iter().zip(pv.iter()).map(|(&g, &v)| g * v).sum()
                };
                {
                    let mut gp = p.grad.borrow_mut();
                    for j in 0..d {
                        gp[j] += wv[i] * go[j];
                    }
                }
                w2.grad.borrow_mut()[i] += dot;
            }
        });
        Ok(out.with_node(id))
    }

    /// `sum_i w[i] ⊙ parts[i]` where `w` is `n x d` (row i weights part i
    /// componentwise) and every part is `1 x d`.
    pub fn elementwise_weighted_sum(&self, w: &Tensor, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("elementwise_weighted_sum"));
        }
        let d = parts[0].cols;
        if w.shape() != (parts.len(), d) {
            return Err(Error::ShapeMismatch {
                op: "elementwise_weighted_sum",
                lhs: w.shape(),
                rhs: (parts.len(), d),
            });
        }
        for p in parts {
            if p.shape() != (1, d) {
                return Err(Error::ShapeMismatch {
                    op: "elementwise_weighted_sum",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let mut out = vec![0.0; d];
        {
            let wv = w.values.borrow();
            for (i, p) in parts.iter().enumerate() {
                let pv = p.values.borrow();
                for j in 0..d {
                    out[j] += wv[i * d + j] * pv[j];
                }
            }
        }
        let out = Tensor::from_vec(1, d, out)?;
        let (w2, o2) = (w.clone(), out.clone());
        let parts2: Vec<Tensor> = parts.to_vec();
        let id = self.record(move || {
            let go = o2.grad.borrow();
            let wv = w2.values.borrow().clone();
            for (i, p) in parts2.iter().enumerate() {
                let pv = p.values.borrow().clone();
                {
                    let mut gp = p.grad.borrow_mut();
                    for j in 0..d {
                        gp[j] += wv[i * d + j] * go[j];
                    }
                }
                let mut gw = w2.grad.borrow_mut();
                for j in 0..d {
                    gw[i * d + j] += pv[j] * go[j];
                }
            }
        });
        Ok(out.with_node(id))
    }

    /// Propagate gradients from a scalar loss back through every recorded
    /// operation, in reverse recording order. Each reachable tensor's gradient
    /// buffer accumulates `d loss / d tensor`; unreachable tensors are left
    /// untouched.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::NotScalar {
                rows: loss.rows,
                cols: loss.cols,
            });
        }
        if loss.node_id.is_none() {
            return Err(Error::NotOnTape);
        }
        loss.grad.borrow_mut()[0] += 1.0;
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            (node.back)();
        }
        Ok(())
    }
}

const LOG_CLAMP: f64 = 1e-12;

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard Gaussian CDF.
fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_scalar(x: f64) -> f64 {
    x * norm_cdf(x)
}

fn gelu_derivative(x: f64) -> f64 {
    norm_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Max-subtracted softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / denom).collect()
}

/// Compare analytic gradients against central finite differences.
///
/// Runs `f` once on a fresh tape and backpropagates to collect analytic
/// gradients for `params`, then perturbs every parameter component by `±h`
/// and re-evaluates. Returns the maximum over components of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must be deterministic (disable dropout while checking).
pub fn finite_difference_check<F>(params: &[(String, Tensor)], h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&Tape) -> Result<Tensor>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad_vec()).collect();

    let mut max_rel: f64 = 0.0;
    for (pi, (name, p)) in params.iter().enumerate() {
        for i in 0..p.len() {
            let orig = p.get_flat(i);
            p.set_flat(i, orig + h);
            let plus = f(&Tape::new())?.item();
            p.set_flat(i, orig - h);
            let minus = f(&Tape::new())?.item();
            p.set_flat(i, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient check of {name}[{i}]"),
                });
            }
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected.iter()) {
            assert!((a - e).abs() <= tol, "{actual:?} vs {expected:?}");
        }
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape.matmul(&eye, &a).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let tape = Tape::new();
        let a = Tensor::row(&[1.0, 2.0]);
        let b = Tensor::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::zeros(1, 3);
        let b = Tensor::zeros(2, 1);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x3") && msg.contains("2x1"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = Tensor::row(&[1.0, 1.0]);
        let b = Tensor::from_vec(2, 1, vec![2.0, 5.0]).unwrap();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let prod = tape.matmul(&a, &b)?;
            Ok(tape.sum(&prod))
        })
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
        // gradient of sum(a*b) w.r.t. a at the given point is b^T
        let tape = Tape::new();
        let prod = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum(&prod);
        a.zero_grad();
        b.zero_grad();
        tape.backward(&loss).unwrap();
        assert_close(&a.grad_vec(), &[2.0, 5.0], 1e-12);
    }

    #[test]
    fn hadamard_pointwise() {
        let tape = Tape::new();
        let a = Tensor::row(&[1.0, 2.0, 3.0]);
        let b = Tensor::row(&[4.0, 5.0, 6.0]);
        let out = tape.hadamard(&a, &b).unwrap();
        assert_eq!(out.to_vec(), vec![4.0, 10.0, 18.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let tape = Tape::new();
        let x = Tensor::row(&[1.5, -2.5]);
        let out = tape.add(&x, &Tensor::zeros(1, 2)).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn hadamard_gradient() {
        let a = Tensor::row(&[1.0, 1.0]);
        let b = Tensor::row(&[7.0, 9.0]);
        let params = vec![("a".to_string(), a.clone())];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let prod = tape.hadamard(&a, &b)?;
            Ok(tape.sum(&prod))
        })
        .unwrap();
        assert!(err < 1e-9);
        let tape = Tape::new();
        let prod = tape.hadamard(&a, &b).unwrap();
        let loss = tape.sum(&prod);
        a.zero_grad();
        tape.backward(&loss).unwrap();
        assert_close(&a.grad_vec(), &[7.0, 9.0], 1e-12);
    }

    #[test]
    fn hadamard_with_aliased_inputs() {
        // d/dx sum(x ⊙ x) = 2x
        let x = Tensor::row(&[2.0]);
        let tape = Tape::new();
        let sq = tape.hadamard(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        tape.backward(&loss).unwrap();
        assert_close(&x.grad_vec(), &[4.0], 1e-12);
    }

    #[test]
    fn concat_values_and_gradient() {
        let tape = Tape::new();
        let a = Tensor::row(&[1.0]);
        let b = Tensor::row(&[2.0]);
        let out = tape.concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0]);

        let c = Tensor::row(&[1.0, 2.0]);
        let d = Tensor::row(&[3.0, 4.0]);
        let e = Tensor::row(&[5.0, 6.0]);
        let out = tape.concat(&[c, d, e]).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let loss = tape.sum(&tape.concat(&[a.clone(), b.clone()]).unwrap());
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad_vec(), vec![1.0]);
        assert_eq!(b.grad_vec(), vec![1.0]);
    }

    #[test]
    fn concat_rejects_empty_and_mismatched() {
        let tape = Tape::new();
        assert!(matches!(tape.concat(&[]), Err(Error::EmptyInput(_))));
        let a = Tensor::zeros(1, 2);
        let b = Tensor::zeros(2, 2);
        assert!(tape.concat(&[a, b]).is_err());
    }

    #[test]
    fn activations_at_zero() {
        let tape = Tape::new();
        let zero = Tensor::row(&[0.0]);
        assert_eq!(tape.sigmoid(&zero).to_vec(), vec![0.5]);
        assert_eq!(tape.tanh(&zero).to_vec(), vec![0.0]);
        assert_eq!(tape.gelu(&zero).to_vec(), vec![0.0]);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        let x = Tensor::row(&[1.0]);
        let params = vec![("x".to_string(), x.clone())];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let y = tape.gelu(&x);
            Ok(tape.sum(&y))
        })
        .unwrap();
        assert!(err < 1e-6, "gelu fd err {err}");
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        for seed in [[1.7, -0.3], [0.2, 2.4]] {
            let x = Tensor::row(&seed);
            let params = vec![("x".to_string(), x.clone())];
            for f in [Tape::sigmoid as fn(&Tape, &Tensor) -> Tensor, Tape::tanh, Tape::gelu] {
                let err = finite_difference_check(&params, 1e-5, |tape| {
                    let y = f(tape, &x);
                    Ok(tape.sum(&y))
                })
                .unwrap();
                assert!(err < 1e-8, "activation fd err {err}");
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape = Tape::new();
        let out = tape.softmax(&Tensor::row(&[0.0, 0.0])).unwrap();
        assert_eq!(out.to_vec(), vec![0.5, 0.5]);

        let out = tape.softmax(&Tensor::row(&[3.0, 3.0, 3.0, 3.0])).unwrap();
        assert_close(&out.to_vec(), &[0.25; 4], 1e-15);

        let out = tape.softmax(&Tensor::row(&[1000.0, 0.0])).unwrap();
        let v = out.to_vec();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let tape = Tape::new();
        let base = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 7.5).collect();
        let a = tape.softmax(&Tensor::row(&base)).unwrap();
        let b = tape.softmax(&Tensor::row(&shifted)).unwrap();
        assert_close(&a.to_vec(), &b.to_vec(), 1e-12);
        let sum: f64 = a.to_vec().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_gradient() {
        let x = Tensor::row(&[0.4, -0.9, 1.3]);
        let params = vec![("x".to_string(), x.clone())];
        // weight the outputs so the gradient is non-trivial
        let w = Tensor::row(&[1.0, 2.0, -1.0]);
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let s = tape.softmax(&x)?;
            let weighted = tape.hadamard(&s, &w)?;
            Ok(tape.sum(&weighted))
        })
        .unwrap();
        assert!(err < 1e-8, "softmax fd err {err}");
    }

    #[test]
    fn col_softmax_columns_sum_to_one() {
        let tape = Tape::new();
        let x = Tensor::from_vec(3, 2, vec![0.1, 5.0, -2.0, 5.0, 1.4, 5.0]).unwrap();
        let s = tape.col_softmax(&x);
        for j in 0..2 {
            let col_sum: f64 = (0..3).map(|i| s.get(i, j)).sum();
            assert!((col_sum - 1.0).abs() < 1e-9);
        }
        // the constant column is uniform
        for i in 0..3 {
            assert!((s.get(i, 1) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn col_softmax_gradient() {
        let x = Tensor::from_vec(2, 3, vec![0.3, -0.5, 1.0, 0.9, 0.1, -1.2]).unwrap();
        let w = Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 0.7, 0.2, 1.1]).unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let s = tape.col_softmax(&x);
            let weighted = tape.hadamard(&s, &w)?;
            Ok(tape.sum(&weighted))
        })
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = Tensor::row(&[1.0, 2.0, 3.0]);
        let loss = tape.sum(&x);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_recorded_loss() {
        let tape = Tape::new();
        let x = Tensor::row(&[1.0, 2.0]);
        assert!(matches!(tape.backward(&x), Err(Error::NotScalar { .. })));
        let leaf = Tensor::scalar(4.0);
        assert!(matches!(tape.backward(&leaf), Err(Error::NotOnTape)));
    }

    #[test]
    fn unreachable_tensors_keep_zero_grad() {
        let tape = Tape::new();
        let x = Tensor::row(&[1.0, 2.0]);
        let unused = Tensor::row(&[5.0]);
        let loss = tape.sum(&x);
        tape.backward(&loss).unwrap();
        assert_eq!(unused.grad_vec(), vec![0.0]);
    }

    #[test]
    fn zero_grad_reset_reproduces_gradients() {
        let x = Tensor::row(&[0.7, -0.2, 1.1]);
        let run = |x: &Tensor| {
            let tape = Tape::new();
            let sq = tape.hadamard(x, x).unwrap();
            let loss = tape.sum(&sq);
            tape.backward(&loss).unwrap();
            x.grad_vec()
        };
        let g1 = run(&x);
        x.zero_grad();
        let g2 = run(&x);
        assert_eq!(g1, g2);
    }

    #[test]
    fn lookup_row_gradient_is_sparse() {
        let table = Tensor::from_vec(4, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        let tape = Tape::new();
        let row = tape.lookup_row(&table, 3).unwrap();
        assert_eq!(row.to_vec(), vec![6.0, 7.0]);
        let loss = tape.sum(&row);
        tape.backward(&loss).unwrap();
        let g = table.grad_vec();
        assert_eq!(g, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_lookup_accumulates() {
        let table = Tensor::from_vec(4, 2, vec![0.5; 8]).unwrap();
        let params = vec![("table".to_string(), table.clone())];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let a = tape.lookup_row(&table, 1)?;
            let b = tape.lookup_row(&table, 1)?;
            let s = tape.add(&a, &b)?;
            Ok(tape.sum(&s))
        })
        .unwrap();
        assert!(err < 1e-9);
        let tape = Tape::new();
        table.zero_grad();
        let a = tape.lookup_row(&table, 1).unwrap();
        let b = tape.lookup_row(&table, 1).unwrap();
        let s = tape.add(&a, &b).unwrap();
        let loss = tape.sum(&s);
        tape.backward(&loss).unwrap();
        assert_eq!(table.grad_vec()[2..4], [2.0, 2.0]);
    }

    #[test]
    fn weighted_sum_and_elementwise_weighted_sum_gradients() {
        let w = Tensor::row(&[0.3, 0.7]);
        let p1 = Tensor::row(&[1.0, -2.0]);
        let p2 = Tensor::row(&[0.5, 3.0]);
        let params = vec![
            ("w".to_string(), w.clone()),
            ("p1".to_string(), p1.clone()),
            ("p2".to_string(), p2.clone()),
        ];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let s = tape.weighted_sum(&w, &[p1.clone(), p2.clone()])?;
            let sq = tape.hadamard(&s, &s)?;
            Ok(tape.sum(&sq))
        })
        .unwrap();
        assert!(err < 1e-8);

        let wm = Tensor::from_vec(2, 2, vec![0.2, 0.8, 0.8, 0.2]).unwrap();
        let params = vec![
            ("wm".to_string(), wm.clone()),
            ("p1".to_string(), p1.clone()),
            ("p2".to_string(), p2.clone()),
        ];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let s = tape.elementwise_weighted_sum(&wm, &[p1.clone(), p2.clone()])?;
            let sq = tape.hadamard(&s, &s)?;
            Ok(tape.sum(&sq))
        })
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn log_pick_value_and_gradient() {
        let probs = Tensor::row(&[0.2, 0.5, 0.3]);
        let tape = Tape::new();
        let lp = tape.log_pick(&probs, 1).unwrap();
        assert!((lp.item() - 0.5_f64.ln()).abs() < 1e-15);
        tape.backward(&lp).unwrap();
        assert_close(&probs.grad_vec(), &[0.0, 2.0, 0.0], 1e-12);
    }

    #[test]
    fn finite_difference_check_on_linear_function_is_exact() {
        // central differences are exact for linear maps up to rounding
        let w = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::from_vec(2, 1, vec![0.5, -1.5]).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let y = tape.matmul(&w, &x)?;
            Ok(tape.sum(&y))
        })
        .unwrap();
        assert!(err < 1e-10, "linear fd err {err}");
    }

    #[test]
    fn finite_difference_check_on_quadratic_form() {
        // f(x) = x^T A x has analytic gradient (A + A^T) x
        let a = Tensor::from_vec(2, 2, vec![2.0, 1.0, 0.0, 3.0]).unwrap();
        let x = Tensor::row(&[0.7, -0.4]);
        let params = vec![("x".to_string(), x.clone())];
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let xa = tape.matmul(&x, &a)?;
            let prod = tape.hadamard(&xa, &x)?;
            Ok(tape.sum(&prod))
        })
        .unwrap();
        assert!(err < 1e-9, "quadratic fd err {err}");
    }

    proptest! {
        #[test]
        fn matmul_output_shape_is_function_of_inputs(m in 1usize..5, k in 1usize..5, n in 1usize..5) {
            let tape = Tape::new();
            let a = Tensor::zeros(m, k);
            let b = Tensor::zeros(k, n);
            let out = tape.matmul(&a, &b).unwrap();
            prop_assert_eq!(out.shape(), (m, n));
        }

        #[test]
        fn concat_width_is_sum_of_parts(widths in proptest::collection::vec(1usize..6, 1..5)) {
            let tape = Tape::new();
            let parts: Vec<Tensor> = widths.iter().map(|&w| Tensor::zeros(1, w)).collect();
            let out = tape.concat(&parts).unwrap();
            prop_assert_eq!(out.cols(), widths.iter().sum::<usize>());
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let tape = Tape::new();
            let s = tape.softmax(&Tensor::row(&xs)).unwrap().to_vec();
            let total: f64 = s.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
            let s2 = tape.softmax(&Tensor::row(&shifted)).unwrap().to_vec();
            for (a, b) in s.iter().zip(s2.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn random_expression_gradients_match_finite_differences(
            seed_vals in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let x = Tensor::row(&seed_vals);
            let w = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let params = vec![("x".to_string(), x.clone()), ("w".to_string(), w.clone())];
            let err = finite_difference_check(&params, 1e-5, |tape| {
                let h = tape.matmul(&x, &w)?;
                let t = tape.tanh(&h);
                let g = tape.gelu(&t);
                let s = tape.softmax(&g)?;
                let lp = tape.log_pick(&s, 1)?;
                Ok(tape.scale(&lp, -1.0))
            }).unwrap();
            prop_assert!(err < 1e-4, "fd err {}", err);
        }
    }
}
