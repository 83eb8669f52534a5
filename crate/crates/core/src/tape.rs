//! A small reverse-mode automatic differentiation tape.
//!
//! Every model in the crate is written as a sequence of tape operations, so
//! a single forward pass yields both values and (on demand) gradients with
//! respect to the named parameters that were registered on the tape.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `b` may be a `1 x cols` row, broadcast over the rows of `a`.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Transpose(Var),
    L2NormalizeRows(Var),
    /// Pairwise squared Euclidean distances between the rows of two inputs.
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Named parameter tensors.
pub type Params = BTreeMap<String, Tensor>;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant: receives no gradient that anyone reads.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers (once) the named parameter and returns its leaf.
    pub fn param(&mut self, name: &str, params: &Params) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = self.push(t, Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&crate::tensor::softmax(x.row(i)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&crate::tensor::log_softmax(x.row(i)));
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                out.row_mut(i)[offset..offset + t.cols()].copy_from_slice(t.row(i));
                offset += t.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let value = Tensor::new(end - start, cols, x.data()[start * cols..end * cols].to_vec());
        self.push(value, Op::SliceRows(a, start))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), end - start);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::row_vector(vec![self.value(a).sum()]);
        self.push(value, Op::SumAll(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let n = crate::tensor::norm(x.row(i));
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "sq_dist width mismatch");
        let mut out = Tensor::zeros(x.rows(), y.rows());
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                out.set(i, j, crate::tensor::squared_distance(x.row(i), y.row(j)));
            }
        }
        self.push(out, Op::SqDist(a, b))
    }

    /// `x W + b` for a weight `in x out` and bias `1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar node");
        t.data()[0]
    }

    /// Back-propagates from the scalar `loss` and returns the gradient of
    /// every registered parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| {
                        let t = self.value(*v);
                        Tensor::zeros(t.rows(), t.cols())
                    });
                (name.clone(), g)
            })
            .collect()
    }

    /// Gradient with respect to an arbitrary node (used by tests that check
    /// derivatives of intermediate quantities).
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Tensor {
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for idx in (wrt.0..=loss.0).rev() {
            if idx == wrt.0 {
                break;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        grads[wrt.0].take().unwrap_or_else(|| {
            let t = self.value(wrt);
            Tensor::zeros(t.rows(), t.cols())
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul(&bv.transpose()));
                accumulate(grads, *b, av.transpose().matmul(g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, unbroadcast(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, unbroadcast(g, self.value(*b)).scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |g, b| g * b));
                accumulate(grads, *b, g.zip_map(av, |g, a| g * a));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
            Op::Ln(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g / x)),
            Op::SoftmaxRows(a) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s: f64 = crate::tensor::dot(g.row(i), y.row(i));
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = y.get(i, j) * (g.get(i, j) - s);
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::LogSoftmaxRows(a) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s: f64 = g.row(i).iter().sum();
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = g.get(i, j) - y.get(i, j).exp() * s;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    let mut part = Tensor::zeros(g.rows(), cols);
                    for i in 0..g.rows() {
                        part.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                    }
                    accumulate(grads, *p, part);
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let cols = g.cols();
                    let part = Tensor::new(
                        rows,
                        cols,
                        g.data()[offset * cols..(offset + rows) * cols].to_vec(),
                    );
                    accumulate(grads, *p, part);
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut full = Tensor::zeros(av.rows(), av.cols());
                let cols = av.cols();
                full.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                accumulate(grads, *a, full);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut full = Tensor::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    full.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, full);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let n = av.rows() as f64;
                let mut full = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for (o, gv) in full.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = gv / n;
                    }
                }
                accumulate(grads, *a, full);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Tensor::filled(av.rows(), av.cols(), g.data()[0]));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let n = crate::tensor::norm(x.row(i));
                    let gy = crate::tensor::dot(g.row(i), y.row(i));
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = (g.get(i, j) - y.get(i, j) * gy) / n;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::SqDist(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                let mut gz = Tensor::zeros(z.rows(), z.cols());
                for i in 0..x.rows() {
                    for j in 0..z.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..x.cols() {
                            let diff = 2.0 * gij * (x.get(i, k) - z.get(j, k));
                            gx.row_mut(i)[k] += diff;
                            gz.row_mut(j)[k] -= diff;
                        }
                    }
                }
                accumulate(grads, *a, gx);
                accumulate(grads, *b, gz);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    assert!(
        b.rows() == 1 && b.cols() == a.cols(),
        "cannot broadcast {:?} onto {:?}",
        b.shape(),
        a.shape()
    );
    let mut out = a.clone();
    for i in 0..a.rows() {
        for (o, bv) in out.row_mut(i).iter_mut().zip(b.row(0)) {
            *o = f(*o, *bv);
        }
    }
    out
}

fn unbroadcast(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        let mut out = Tensor::zeros(1, g.cols());
        for i in 0..g.rows() {
            for (o, gv) in out.row_mut(0).iter_mut().zip(g.row(i)) {
                *o += gv;
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
