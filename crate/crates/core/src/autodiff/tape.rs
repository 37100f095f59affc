use std::rc::Rc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{ensure, Result};
use crate::rank::{self, Permutation, ScoreVector};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Visibility pattern for row-wise (log-)softmax.
#[derive(Debug, Clone)]
pub enum Mask {
    /// Row `i` sees columns `j < prefix + i + 1`.
    Causal { prefix: usize },
    /// Explicit row-major visibility flags, same size as the input.
    Dense(Rc<[bool]>),
}

impl Mask {
    fn visible(&self, row: usize, cols: usize) -> impl Fn(usize) -> bool + '_ {
        move |j| match self {
            Mask::Causal { prefix } => j < prefix + row + 1,
            Mask::Dense(flags) => flags[row * cols + j],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    IndexSelect(Var, Rc<[usize]>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize, usize),
    Scale(Var, f64),
    Gather(Var, Rc<[usize]>),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Reshape(Var),
    PlLogProb(Var, Rc<Permutation>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are appended in evaluation order, so reverse append order is a valid
/// reverse topological order for [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], keyed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zeros when nothing reached it.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn same_or_scalar(a: &Tensor, b: &Tensor, op: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(crate::Error::Contract(format!(
            "{op}: shapes {:?} and {:?} are incompatible (only scalar broadcasting)",
            a.shape(),
            b.shape()
        )))
    }
}

fn elementwise(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let get = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
    let data = (0..n).map(|i| f(get(ad, i), get(bd, i))).collect();
    Tensor::from_parts(shape, data)
}

fn two_d(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    ensure!(t.shape().len() == 2, "{op} needs a matrix, got shape {:?}", t.shape());
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_or_scalar(self.value(a), self.value(b), "add")?;
        let t = elementwise(self.value(a), self.value(b), shape, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_or_scalar(self.value(a), self.value(b), "sub")?;
        let t = elementwise(self.value(a), self.value(b), shape, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_or_scalar(self.value(a), self.value(b), "mul")?;
        let t = elementwise(self.value(a), self.value(b), shape, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d(self.value(a), "matmul")?;
        let (k2, n) = two_d(self.value(b), "matmul")?;
        ensure!(k == k2, "matmul: inner dims {k} and {k2} differ");
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = two_d(self.value(a), "transpose")?;
        let data = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a), rg))
    }

    fn check_mask(&self, x: Var, mask: &Option<Mask>) -> Result<()> {
        if let Some(Mask::Dense(flags)) = mask {
            ensure!(
                flags.len() == self.value(x).numel(),
                "mask has {} flags for {} entries",
                flags.len(),
                self.value(x).numel()
            );
        }
        Ok(())
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        self.check_mask(x, &mask)?;
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let o = &mut out[i * c..(i + 1) * c];
            match &mask {
                Some(m) => kernels::softmax_row(row, m.visible(i, c), o),
                None => kernels::softmax_row(row, |_| true, o),
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Row-wise log-softmax over the last axis; masked entries are `-inf`.
    pub fn log_softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        self.check_mask(x, &mask)?;
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let o = &mut out[i * c..(i + 1) * c];
            match &mask {
                Some(m) => kernels::log_softmax_row(row, m.visible(i, c), o),
                None => kernels::log_softmax_row(row, |_| true, o),
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_or_scalar(self.value(a), self.value(b), "minimum")?;
        let t = elementwise(self.value(a), self.value(b), shape, f64::min);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Minimum(a, b), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of a matrix along `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = two_d(self.value(x), "sum_axis")?;
        ensure!(axis < 2, "sum_axis: axis {axis} out of range");
        let d = self.value(x).data();
        let out = if axis == 0 {
            let mut o = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    o[j] += d[i * c + j];
                }
            }
            o
        } else {
            (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect()
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::SumAxis(x, axis), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Rows of a matrix (or entries of a vector) picked by `indices`.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, width, shape) = match xv.shape() {
            [n] => (*n, 1, vec![indices.len()]),
            [r, c] => (*r, *c, vec![indices.len(), *c]),
            s => return Err(crate::Error::Contract(format!("index_select on shape {s:?}"))),
        };
        ensure!(!indices.is_empty(), "index_select with no indices");
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            ensure!(i < rows, "index_select: index {i} out of {rows}");
            data.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::IndexSelect(x, indices.into()),
            rg,
        ))
    }

    /// Concatenation along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!xs.is_empty(), "concat of nothing");
        let rank = self.shape(xs[0]).len();
        ensure!(axis < rank && rank <= 2, "concat: axis {axis} for rank {rank}");
        for &x in xs {
            ensure!(self.shape(x).len() == rank, "concat: mixed ranks");
        }
        let value = if rank == 1 {
            let data: Vec<f64> = xs.iter().flat_map(|&x| self.value(x).data().to_vec()).collect();
            Tensor::vector(data)
        } else if axis == 0 {
            let c = self.shape(xs[0])[1];
            let mut data = Vec::new();
            let mut r = 0;
            for &x in xs {
                ensure!(self.shape(x)[1] == c, "concat rows: widths differ");
                r += self.shape(x)[0];
                data.extend_from_slice(self.value(x).data());
            }
            Tensor::from_parts(vec![r, c], data)
        } else {
            let r = self.shape(xs[0])[0];
            let widths: Vec<usize> = xs.iter().map(|&x| self.shape(x)[1]).collect();
            for &x in xs {
                ensure!(self.shape(x)[0] == r, "concat cols: heights differ");
            }
            let c: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for &x in xs {
                    data.extend_from_slice(self.value(x).row(i));
                }
            }
            Tensor::from_parts(vec![r, c], data)
        };
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        ensure!(axis < shape.len() && shape.len() <= 2, "narrow: bad axis {axis}");
        ensure!(
            len > 0 && start + len <= shape[axis],
            "narrow: [{start}, {}) outside dim {}",
            start + len,
            shape[axis]
        );
        let (r, c) = xv.dims2();
        let (data, out_shape) = if shape.len() == 1 {
            (xv.data()[start..start + len].to_vec(), vec![len])
        } else if axis == 0 {
            (xv.data()[start * c..(start + len) * c].to_vec(), vec![len, c])
        } else {
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&xv.row(i)[start..start + len]);
            }
            (d, vec![r, len])
        };
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Narrow(x, axis, start, len),
            rg,
        ))
    }

    /// Per-row pick: output `[i] = x[i, cols[i]]`.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        ensure!(cols.len() == r, "gather: {} columns for {r} rows", cols.len());
        let mut data = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            ensure!(j < c, "gather: column {j} out of {c}");
            data.push(self.value(x).data()[i * c + j]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::Gather(x, cols.into()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Repeats a length-`n` vector (or 1×n matrix) into `rows`×n through an
    /// explicit matmul with a column of ones.
    pub fn repeat_rows(&mut self, b: Var, rows: usize) -> Result<Var> {
        let n = self.value(b).numel();
        let row = self.reshape(b, &[1, n])?;
        let ones = self.constant(Tensor::full(&[rows, 1], 1.0));
        self.matmul(ones, row)
    }

    /// `log P(perm | s)` under Plackett-Luce for a score vector `s`.
    pub fn pl_log_prob(&mut self, s: Var, perm: &Permutation) -> Result<Var> {
        let sv = ScoreVector(self.value(s).data().to_vec());
        let lp = rank::pl_log_prob(perm, &sv)?;
        let rg = self.rg(s);
        Ok(self.push(Tensor::scalar(lp), Op::PlLogProb(s, Rc::new(perm.clone())), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).is_scalar(),
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if let Some(ga) = self.acc(grads, v) {
                        if ga.len() == 1 && g.len() > 1 {
                            ga[0] += s * g.iter().sum::<f64>();
                        } else {
                            for (x, y) in ga.iter_mut().zip(g) {
                                *x += s * y;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let od = self.value(other).data().to_vec();
                    if let Some(ga) = self.acc(grads, v) {
                        let get = |i: usize| if od.len() == 1 { od[0] } else { od[i] };
                        if ga.len() == 1 && g.len() > 1 {
                            ga[0] += g.iter().enumerate().map(|(i, y)| y * get(i)).sum::<f64>();
                        } else {
                            for (i, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                                *x += y * get(i);
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(ga, g, bd, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(gb, ad, g, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (r, c) = self.value(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (r, c) = self.value(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let total: f64 = (0..c).filter(|&j| y[j].is_finite()).map(|j| gy[j]).sum();
                        for j in 0..c {
                            if y[j].is_finite() {
                                gx[i * c + j] += gy[j] - y[j].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xd[i];
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * out[i];
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::SumAxis(x, axis) => {
                let (r, c) = self.value(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                }
            }
            Op::IndexSelect(x, idx) => {
                let width = match self.shape(*x) {
                    [_] => 1,
                    s => s[1],
                };
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..width {
                            gx[i * width + j] += g[k * width + j];
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                let rank = node.value.shape().len();
                let total_c = node.value.dims2().1;
                for &x in xs {
                    let (r, c) = self.value(x).dims2();
                    let n = self.value(x).numel();
                    if let Some(gx) = self.acc(grads, x) {
                        if rank == 1 || *axis == 0 {
                            for (a, b) in gx.iter_mut().zip(&g[offset..offset + n]) {
                                *a += b;
                            }
                        } else {
                            for i in 0..r {
                                for j in 0..c {
                                    gx[i * c + j] += g[i * total_c + offset + j];
                                }
                            }
                        }
                    }
                    offset += if rank == 1 || *axis == 0 { n } else { c };
                }
            }
            Op::Narrow(x, axis, start, len) => {
                let rank = self.shape(*x).len();
                let (r, c) = self.value(*x).dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    if rank == 1 {
                        for k in 0..*len {
                            gx[start + k] += g[k];
                        }
                    } else if *axis == 0 {
                        for k in 0..len * c {
                            gx[start * c + k] += g[k];
                        }
                    } else {
                        for i in 0..r {
                            for k in 0..*len {
                                gx[i * c + start + k] += g[i * len + k];
                            }
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += s * g[i];
                    }
                }
            }
            Op::Gather(x, cols) => {
                let c = self.value(*x).dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        if xd[i] >= *lo && xd[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Minimum(a, b) => {
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                let get = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let n = g.len();
                let a_wins: Vec<bool> = (0..n).map(|i| get(&ad, i) <= get(&bd, i)).collect();
                for (v, wins) in [(*a, true), (*b, false)] {
                    if let Some(gv) = self.acc(grads, v) {
                        for i in 0..n {
                            if a_wins[i] == wins {
                                let slot = if gv.len() == 1 { 0 } else { i };
                                gv[slot] += g[i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::PlLogProb(s, perm) => {
                let sv = ScoreVector(self.value(*s).data().to_vec());
                let dg = rank::pl_grad_scores(perm, &sv).expect("shape checked in forward");
                if let Some(gs) = self.acc(grads, *s) {
                    for (a, b) in gs.iter_mut().zip(&dg.0) {
                        *a += g[0] * b;
                    }
                }
            }
        }
    }
}
