//! Reverse-mode differentiation tape.
//!
//! Every op appends one node holding its forward value and a gradient rule.
//! Nodes only refer to earlier nodes, so replaying the tape backwards visits
//! each record once in reverse topological order.

use super::kernels::{self, axis_split, gemm_nn, gemm_nt, gemm_tn};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index_for_test(i: usize) -> Var {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Gelu(Var),
    LogAddExp(Var, Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Tile { src: Var, reps: usize },
    Sum(Var),
    Mean(Var),
    AddRowBroadcast(Var, Var),
    MaskRows(Var, Vec<bool>),
    Softmax { src: Var, axis: usize },
    MaskedSoftmax { src: Var, active: Vec<bool> },
    LogSoftmax { src: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

/// Accumulation target for an input's gradient, allocated lazily.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.data.len()]))
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Dynamic tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Gradients are tracked iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Registers a constant (never differentiated) leaf.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.constant(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph node is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward loss w.r.t. `v`. `None` if `v` is not on
    /// a differentiable path or backward has not run.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].shape.clone(), g.clone()).expect("grad matches shape"))
    }

    /// Like [`grad`](Self::grad) but yields zeros for nodes that were never
    /// reached by the backward pass.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].shape))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.nodes[a.0].shape.clone(), data, op, ng)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.nodes[a.0].shape.clone(), data, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; the caller keeps the argument positive.
    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    /// Elementwise `ln(exp(a) + exp(b))`, evaluated stably.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("log_add_exp", a, b)?;
        Ok(self.zip_map(a, b, Op::LogAddExp(a, b), kernels::log_add_exp))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), ng))
    }

    /// Batched matmul: `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..g {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![g, m, n], out, Op::Bmm(a, b), ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![0.0; self.nodes[a.0].data.len()];
        kernels::permute_into(&self.nodes[a.0].data, &shape, perm, &mut out);
        let ng = self.ng(a);
        Ok(self.push(out_shape, out, Op::Permute(a, perm.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.nodes[a.0].shape.len();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0];
        if shape.iter().product::<usize>() != src.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &src.shape, shape));
        }
        let data = src.data.clone();
        let ng = src.needs_grad;
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), ng))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for axis of length {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(out_shape, out, Op::Slice { src: a, axis, start }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base_shape = self.nodes[first.0].shape.clone();
        if axis >= base_shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base_shape.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let node = &self.nodes[p.0];
                let chunk = node.shape[axis] * inner;
                out.extend_from_slice(&node.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Repeats `a` `reps` times along axis 0.
    pub fn tile(&mut self, a: Var, reps: usize) -> Result<Var> {
        if reps == 0 {
            return Err(Error::invalid("tile with zero repetitions"));
        }
        let node = &self.nodes[a.0];
        if node.shape.is_empty() {
            return Err(Error::InvalidAxis { axis: 0, rank: 0 });
        }
        let mut out = Vec::with_capacity(node.data.len() * reps);
        for _ in 0..reps {
            out.extend_from_slice(&node.data);
        }
        let mut shape = node.shape.clone();
        shape[0] *= reps;
        let ng = node.needs_grad;
        Ok(self.push(shape, out, Op::Tile { src: a, reps }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.ng(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let s = node.data.iter().sum::<f64>() / node.data.len() as f64;
        let ng = node.needs_grad;
        self.push(Vec::new(), vec![s], Op::Mean(a), ng)
    }

    /// `x[r, :] + v` for every row `r` of a matrix.
    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (&self.nodes[x.0].shape, &self.nodes[v.0].shape);
        if sx.len() != 2 || sv.len() != 1 || sx[1] != sv[0] {
            return Err(Error::shape("add_row_broadcast", sx, sv));
        }
        let cols = sx[1];
        let vd = &self.nodes[v.0].data;
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv + vd[i % cols])
            .collect();
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(sx.clone(), data, Op::AddRowBroadcast(x, v), ng))
    }

    /// Zeroes the rows of a matrix where `keep` is false. Dropped rows pass no
    /// gradient back, so they are detached from everything upstream.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || shape[0] != keep.len() {
            return Err(Error::shape("mask_rows", &shape, &[keep.len()]));
        }
        let cols = shape[1];
        let mut data = self.nodes[x.0].data.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                data[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, data, Op::MaskRows(x, keep.to_vec()), ng))
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        let rank = self.nodes[a.0].shape.len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] /= total;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Softmax { src: a, axis }, ng))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|k| (src[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[at(k)] = src[at(k)] - lse;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::LogSoftmax { src: a, axis }, ng))
    }

    /// Softmax over the last axis of `[groups, rows, cols]` scores where
    /// `active[g * cols + c]` marks which columns participate in group `g`.
    /// Inactive columns get exactly zero probability and zero gradient.
    pub fn masked_softmax(&mut self, a: Var, active: &[bool]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 3 || active.len() != shape[0] * shape[2] {
            return Err(Error::shape("masked_softmax", &shape, &[active.len()]));
        }
        let (groups, rows, cols) = (shape[0], shape[1], shape[2]);
        for g in 0..groups {
            if !active[g * cols..(g + 1) * cols].iter().any(|&x| x) {
                return Err(Error::invalid(format!("group {g} has no active columns")));
            }
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for g in 0..groups {
            let act = &active[g * cols..(g + 1) * cols];
            for r in 0..rows {
                let off = (g * rows + r) * cols;
                let row = &src[off..off + cols];
                let max = row
                    .iter()
                    .zip(act)
                    .filter(|(_, &on)| on)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for c in 0..cols {
                    if act[c] {
                        let e = (row[c] - max).exp();
                        out[off + c] = e;
                        total += e;
                    }
                }
                for c in 0..cols {
                    if act[c] {
                        out[off + c] /= total;
                    }
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            shape,
            out,
            Op::MaskedSoftmax {
                src: a,
                active: active.to_vec(),
            },
            ng,
        ))
    }

    /// Layer normalization over the last axis, followed by `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layernorm eps must be positive"));
        }
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        for p in [gamma, beta] {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != 1 || sp[0] != d {
                return Err(Error::shape("layernorm", &shape, sp));
            }
        }
        let src = &self.nodes[x.0].data;
        let (gd, bd) = (&self.nodes[gamma.0].data, &self.nodes[beta.0].data);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Populates gradients of `loss` w.r.t. every node on a differentiable
    /// path. A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.needs_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(t) = slot(nodes, grads, v) {
                        t.iter_mut().zip(g).for_each(|(t, &g)| *t += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(t) = slot(nodes, grads, *a) {
                    t.iter_mut().zip(g).for_each(|(t, &g)| *t += g);
                }
                if let Some(t) = slot(nodes, grads, *b) {
                    t.iter_mut().zip(g).for_each(|(t, &g)| *t -= g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                if let Some(t) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        t[k] += g[k] * bd[k];
                    }
                }
                if let Some(t) = slot(nodes, grads, *b) {
                    for k in 0..g.len() {
                        t[k] += g[k] * ad[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(t) = slot(nodes, grads, *a) {
                    t.iter_mut().zip(g).for_each(|(t, &g)| *t += g * c);
                }
            }
            Op::AddScalar(a) => {
                if let Some(t) = slot(nodes, grads, *a) {
                    t.iter_mut().zip(g).for_each(|(t, &g)| *t += g);
                }
            }
            Op::Exp(a) => {
                if let Some(t) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        t[k] += g[k] * node.data[k];
                    }
                }
            }
            Op::Ln(a) => {
                let ad = &nodes[a.0].data;
                if let Some(t) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        t[k] += g[k] / ad[k];
                    }
                }
            }
            Op::Square(a) => {
                let ad = &nodes[a.0].data;
                if let Some(t) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        t[k] += 2.0 * g[k] * ad[k];
                    }
                }
            }
            Op::Gelu(a) => {
                let ad = &nodes[a.0].data;
                if let Some(t) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        t[k] += g[k] * kernels::gelu_grad(ad[k]);
                    }
                }
            }
            Op::LogAddExp(a, b) => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                // d/da = exp(a - out), d/db = exp(b - out)
                if let Some(t) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        t[k] += g[k] * (ad[k] - node.data[k]).exp();
                    }
                }
                if let Some(t) = slot(nodes, grads, *b) {
                    for k in 0..g.len() {
                        t[k] += g[k] * (bd[k] - node.data[k]).exp();
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                if let Some(t) = slot(nodes, grads, *a) {
                    gemm_nt(g, bd, t, m, k, n);
                }
                if let Some(t) = slot(nodes, grads, *b) {
                    gemm_tn(ad, g, t, m, k, n);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                if let Some(t) = slot(nodes, grads, *a) {
                    for q in 0..bs {
                        gemm_nt(
                            &g[q * m * n..(q + 1) * m * n],
                            &bd[q * k * n..(q + 1) * k * n],
                            &mut t[q * m * k..(q + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(t) = slot(nodes, grads, *b) {
                    for q in 0..bs {
                        gemm_tn(
                            &ad[q * m * k..(q + 1) * m * k],
                            &g[q * m * n..(q + 1) * m * n],
                            &mut t[q * k * n..(q + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute(a, perm) => {
                if let Some(t) = slot(nodes, grads, *a) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let mut back = vec![0.0; g.len()];
                    kernels::permute_into(g, &node.shape, &inverse, &mut back);
                    t.iter_mut().zip(&back).for_each(|(t, &b)| *t += b);
                }
            }
            Op::Reshape(a) => {
                if let Some(t) = slot(nodes, grads, *a) {
                    t.iter_mut().zip(g).for_each(|(t, &g)| *t += g);
                }
            }
            Op::Slice { src, axis, start } => {
                let src_shape = &nodes[src.0].shape;
                let (outer, n, inner) = axis_split(src_shape, *axis);
                let len = node.shape[*axis];
                if let Some(t) = slot(nodes, grads, *src) {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let from = o * len * inner;
                        for k in 0..len * inner {
                            t[dst + k] += g[from + k];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].shape[*axis];
                    if let Some(t) = slot(nodes, grads, *p) {
                        for o in 0..outer {
                            let from = o * total * inner + offset * inner;
                            for k in 0..len * inner {
                                t[o * len * inner + k] += g[from + k];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Tile { src, reps } => {
                if let Some(t) = slot(nodes, grads, *src) {
                    let chunk = t.len();
                    for r in 0..*reps {
                        for k in 0..chunk {
                            t[k] += g[r * chunk + k];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(t) = slot(nodes, grads, *a) {
                    t.iter_mut().for_each(|t| *t += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(t) = slot(nodes, grads, *a) {
                    let s = g[0] / t.len() as f64;
                    t.iter_mut().for_each(|t| *t += s);
                }
            }
            Op::AddRowBroadcast(x, v) => {
                let cols = node.shape[1];
                if let Some(t) = slot(nodes, grads, *x) {
                    t.iter_mut().zip(g).for_each(|(t, &g)| *t += g);
                }
                if let Some(t) = slot(nodes, grads, *v) {
                    for (k, &gv) in g.iter().enumerate() {
                        t[k % cols] += gv;
                    }
                }
            }
            Op::MaskRows(x, keep) => {
                let cols = node.shape[1];
                if let Some(t) = slot(nodes, grads, *x) {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            for c in 0..cols {
                                t[r * cols + c] += g[r * cols + c];
                            }
                        }
                    }
                }
            }
            Op::Softmax { src, axis } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let y = &node.data;
                if let Some(t) = slot(nodes, grads, *src) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                t[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { src, active } => {
                let (groups, rows, cols) = (node.shape[0], node.shape[1], node.shape[2]);
                let y = &node.data;
                if let Some(t) = slot(nodes, grads, *src) {
                    for gi in 0..groups {
                        let act = &active[gi * cols..(gi + 1) * cols];
                        for r in 0..rows {
                            let off = (gi * rows + r) * cols;
                            let dot: f64 = (0..cols)
                                .filter(|&c| act[c])
                                .map(|c| g[off + c] * y[off + c])
                                .sum();
                            for c in 0..cols {
                                if act[c] {
                                    t[off + c] += y[off + c] * (g[off + c] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { src, axis } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let y = &node.data;
                if let Some(t) = slot(nodes, grads, *src) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let gsum: f64 = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                t[at(k)] += g[at(k)] - y[at(k)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().expect("rank >= 1");
                let rows = g.len() / d;
                let gd = &nodes[gamma.0].data;
                if let Some(t) = slot(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..d {
                            t[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(t) = slot(nodes, grads, *beta) {
                    for r in 0..rows {
                        for c in 0..d {
                            t[c] += g[r * d + c];
                        }
                    }
                }
                if let Some(t) = slot(nodes, grads, *x) {
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for c in 0..d {
                            let gh = g[off + c] * gd[c];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[off + c];
                        }
                        mean_gh /= d as f64;
                        mean_ghx /= d as f64;
                        for c in 0..d {
                            let gh = g[off + c] * gd[c];
                            t[off + c] += inv_std[r] * (gh - mean_gh - xhat[off + c] * mean_ghx);
                        }
                    }
                }
            }
        }
    }
}
