use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, gelu_from_tanh, gelu_grad_from_tanh, gelu_tanh, split_axis};
use super::{numel, ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean(Var, usize),
    Sum(Var),
    Softmax(Var, usize),
    Gelu(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records primitive operations for one forward pass.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the computation. Nodes whose inputs are all
/// constants are marked as not needing gradients and are skipped entirely
/// during [`Tape::backward`]; that is how frozen encoder weights avoid any
/// gradient work while still passing gradients through to prompts.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_param.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds each known gradient into the matching tensor's grad slot.
    /// Tensors that do not require gradients are never touched.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        for p in params {
            if !p.requires_grad() {
                continue;
            }
            if let Some(g) = self.by_param.get(&p.id()) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.push_shared(shape, Rc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, shape: Vec<usize>, value: Rc<Vec<f64>>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.to_vec()).expect("tape values are well-formed")
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Brings a tensor onto the tape. Repeated calls with the same tensor
    /// identity return the same handle.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.leaves.get(&t.id()) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad());
        self.nodes[v.0].param = Some(t.id());
        self.leaves.insert(t.id(), v);
        v
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), ng)
    }

    /// `a / c`, rounded once per entry.
    pub fn div_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        if c == 0.0 || !c.is_finite() {
            return Err(Error::numeric("div_scalar", format!("divisor {c}")));
        }
        let value = self.value(a).iter().map(|x| x / c).collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::DivScalar(a, c), ng))
    }

    /// `x + y` where `y`'s shape equals the trailing extents of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_broadcast", xs, ys));
        }
        let yv = self.value(y);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(yv.len()) {
            row.iter_mut().zip(yv).for_each(|(a, b)| *a += b);
        }
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(xs.to_vec(), value, Op::AddBroadcast(x, y), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `x·w + b` over the last axis of `x`: `[..×k]·[k×n] + [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("affine", sx, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("affine bias", sw, self.shape(b)));
            }
        }
        let m = self.value(x).len() / k;
        let mut out = match b {
            Some(b) => self.value(b).repeat(m),
            None => vec![0.0; m * n],
        };
        kernels::matmul_acc(self.value(x), self.value(w), &mut out, m, k, n);
        let mut shape = sx.to_vec();
        *shape.last_mut().expect("rank ≥ 1") = n;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(shape, out, Op::Affine { x, w, b }, ng))
    }

    /// Batched product of `[b×m×k]` and `[b×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..bs {
            kernels::matmul_acc(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = Rc::clone(&self.node(x).value);
        let ng = self.ng(x);
        Ok(self.push_shared(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (value, shape) = kernels::permute(self.value(x), self.shape(x), perm);
        let ng = self.ng(x);
        Ok(self.push(shape, value, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat", "empty list"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, value, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: xs.len(),
            });
        }
        if len == 0 || start + len > xs[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} outside extent {}", start + len, xs[axis]),
            ));
        }
        let (outer, extent, inner) = split_axis(&xs, axis);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            value.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(shape, value, Op::Slice { x, axis, start }, ng))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Axis {
                op: "reduce_mean",
                axis,
                rank: xs.len(),
            });
        }
        let (outer, extent, inner) = split_axis(&xs, axis);
        let xv = self.value(x);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &xv[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, s) in value[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let n = extent as f64;
        value.iter_mut().for_each(|v| *v /= n);
        let mut shape = xs;
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(shape, value, Op::Mean(x, axis), ng))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: xs.len(),
            });
        }
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax", "non-finite input"));
        }
        let (outer, extent, inner) = split_axis(&xs, axis);
        let mut value = vec![0.0; xv.len()];
        if inner == 1 {
            for (out, row) in value.chunks_exact_mut(extent).zip(xv.chunks_exact(extent)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = (v - max).exp();
                    total += *o;
                }
                out.iter_mut().for_each(|o| *o /= total);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| (o * extent + e) * inner + i;
                    let max = (0..extent).map(|e| xv[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for e in 0..extent {
                        let v = (xv[at(e)] - max).exp();
                        value[at(e)] = v;
                        total += v;
                    }
                    for e in 0..extent {
                        value[at(e)] /= total;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(xs, value, Op::Softmax(x, axis), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t: Vec<f64> = xv.iter().map(|&v| gelu_tanh(v)).collect();
        let value = xv.iter().zip(&t).map(|(&v, &t)| gelu_from_tanh(v, t)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x, t), ng)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (each the
    /// size of the last axis).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                value[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            xs,
            value,
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

    /// Mean softmax cross-entropy of `[batch×classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} with {c} classes")));
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("cross_entropy", "non-finite logits"));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[label];
        }
        loss /= labels.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(vec![], vec![loss], Op::Mse(pred, target), ng))
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Returns the gradients of every trainable leaf reachable from `root`.
    /// Per-node gradients stay on the tape and can be read with
    /// [`Tape::grad`] until the next call.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, has shape {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out = Gradients::default();
        if !self.ng(root) {
            self.grads = grads;
            return Ok(out);
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            if let (Op::Leaf, Some(pid)) = (&self.nodes[i].op, self.nodes[i].param) {
                out.by_param.insert(pid, g.clone());
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Gradient buffer for input `v`, or None when `v` needs no gradient.
        macro_rules! slot {
            ($v:expr) => {
                slot_for(&self.nodes, grads, $v)
            };
        }
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(nodes, grads, *a, g);
                add_into(nodes, grads, *b, g);
            }
            Op::Sub(a, b) => {
                add_into(nodes, grads, *a, g);
                if let Some(d) = slot!(*b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(d) = slot!(*a) {
                    for j in 0..g.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if let Some(d) = slot!(*b) {
                    for j in 0..g.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = slot!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::DivScalar(a, c) => {
                if let Some(d) = slot!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g / c);
                }
            }
            Op::AddBroadcast(x, y) => {
                add_into(nodes, grads, *x, g);
                let inner = nodes[y.0].value.len();
                if let Some(d) = slot!(*y) {
                    for row in g.chunks(inner) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(d) = slot!(*a) {
                    kernels::matmul_nt_acc(g, bv, d, m, k, n);
                }
                if let Some(d) = slot!(*b) {
                    kernels::matmul_tn_acc(av, g, d, m, k, n);
                }
            }
            Op::Affine { x, w, b } => {
                let (k, n) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                let m = g.len() / n;
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                if let Some(d) = slot!(*x) {
                    kernels::matmul_nt_tall_acc(g, wv, d, m, k, n);
                }
                if let Some(d) = slot!(*w) {
                    kernels::matmul_tn_acc(xv, g, d, m, k, n);
                }
                if let Some(d) = b.and_then(|b| slot!(b)) {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(d) = slot!(*a) {
                    kernels::bmm_nt_acc(g, bv, d, bs, m, k, n);
                }
                if let Some(d) = slot!(*b) {
                    for t in 0..bs {
                        kernels::matmul_tn_acc(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut d[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Reshape(x) => add_into(nodes, grads, *x, g),
            Op::Permute(x, perm) => {
                if let Some(d) = slot!(*x) {
                    let (back, _) = kernels::permute(g, &node.shape, &kernels::inverse_perm(perm));
                    d.iter_mut().zip(&back).for_each(|(d, g)| *d += g);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[*axis] * inner;
                    if let Some(d) = slot!(p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            d[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = &nodes[x.0].shape;
                let (outer, extent, inner) = split_axis(xs, *axis);
                let len = node.shape[*axis];
                if let Some(d) = slot!(*x) {
                    for o in 0..outer {
                        let base = o * extent * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d[base..base + len * inner].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mean(x, axis) => {
                let (outer, extent, inner) = split_axis(&nodes[x.0].shape, *axis);
                let n = extent as f64;
                if let Some(d) = slot!(*x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for e in 0..extent {
                            let base = (o * extent + e) * inner;
                            d[base..base + inner].iter_mut().zip(src).for_each(|(d, g)| *d += g / n);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, extent, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                if let Some(d) = slot!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |e: usize| (o * extent + e) * inner + i;
                            let dot: f64 = (0..extent).map(|e| g[at(e)] * y[at(e)]).sum();
                            for e in 0..extent {
                                d[at(e)] += y[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gelu(x, t) => {
                let xv = &nodes[x.0].value;
                if let Some(d) = slot!(*x) {
                    for j in 0..g.len() {
                        d[j] += g[j] * gelu_grad_from_tanh(xv[j], t[j]);
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
                let d_len = *node.shape.last().expect("rank ≥ 1");
                let gv = &nodes[gamma.0].value;
                if let Some(d) = slot!(*gamma) {
                    for (row_g, row_h) in g.chunks(d_len).zip(xhat.chunks(d_len)) {
                        for j in 0..d_len {
                            d[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(d) = slot!(*beta) {
                    for row_g in g.chunks(d_len) {
                        d.iter_mut().zip(row_g).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(d) = slot!(*x) {
                    let inv_d = 1.0 / d_len as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let rg = &g[r * d_len..(r + 1) * d_len];
                        let rh = &xhat[r * d_len..(r + 1) * d_len];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d_len {
                            let dh = rg[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * rh[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d_len {
                            let dh = rg[j] * gv[j];
                            d[r * d_len + j] += is * (dh - mean_dh - rh[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[logits.0].shape[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(d) = slot!(*logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (&nodes[p.0].value, &nodes[t.0].value);
                let scale = 2.0 * g[0] / pv.len() as f64;
                if let Some(d) = slot!(*p) {
                    for j in 0..pv.len() {
                        d[j] += scale * (pv[j] - tv[j]);
                    }
                }
                if let Some(d) = slot!(*t) {
                    for j in 0..pv.len() {
                        d[j] -= scale * (pv[j] - tv[j]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `g` into `v`'s gradient, copying it when `v` has none yet.
fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(d) => d.iter_mut().zip(g).for_each(|(d, g)| *d += g),
        empty => *empty = Some(g.to_vec()),
    }
}

fn slot_for<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}
