use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::pairs::{PairList, Segments};
use super::param::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { x: Var, c: S },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<S>, rstd: Vec<S> },
    Gelu(Var),
    AvgPool { x: Var, k: usize, stride: usize },
    Conv { x: Var, w: Var, b: Option<Var>, cols: Tensor<S>, geom: ConvGeom },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    PairDot { q: Var, k: Var, pairs: Arc<PairList>, heads: usize, scale: S },
    SegSoftmax { x: Var, segs: Arc<Segments> },
    PairAggregate { w: Var, v: Var, pairs: Arc<PairList> },
    PairSpread { w: Var, src: Var, pairs: Arc<PairList> },
    Bilinear(Var),
    CrossEntropy { logits: Var, labels: Arc<[u32]>, probs: Tensor<S> },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Tape recording one forward pass. Nodes are appended in evaluation order,
/// so insertion order is a topological order and backward simply walks the
/// tape in reverse.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    n_params: usize,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), n_params: 0 }
    }

    /// Starts a tape whose first nodes are the parameters of `store`, in
    /// store order; `param(id)` then resolves to the matching node.
    pub fn with_params(store: &ParamStore<S>) -> Self {
        let mut g = Self::new();
        for p in store.iter() {
            g.leaf(p.value.clone(), p.trainable);
        }
        g.n_params = store.len();
        g
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.index() < self.n_params, "parameter {id:?} not bound to this graph");
        Var(id.index())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<S> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` where each flag transposes the trailing two axes; rank-3
    /// operands are multiplied batch-wise.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = kernels::bmm(self.value(a), ta, self.value(b), tb)?;
        self.push(Op::MatMul { a, b, ta, tb }, out, &[a, b], "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), out, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), out, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, &[a, b], "mul")
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rank() != 1 || rv.len() != xv.last_dim() {
            return Err(Error::shape(name, xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        let c = rv.len();
        for chunk in out.data_mut().chunks_exact_mut(c) {
            for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                *o = f(*o, r);
            }
        }
        Ok(out)
    }

    /// `x + row` with `row` broadcast over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        self.push(Op::AddRow { x, row }, out, &[x, row], "add_row")
    }

    /// `x ⊙ row` with `row` broadcast over every leading index.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        self.push(Op::MulRow { x, row }, out, &[x, row], "mul_row")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, out, &[x], "scale")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        self.push(Op::Softmax { x, axis }, out, &[x], "softmax")
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let r = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            Op::LayerNorm { x, gamma, beta, xhat: r.xhat, rstd: r.rstd },
            r.out,
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.push(Op::Gelu(x), out, &[x], "gelu")
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let out = kernels::avg_pool2d(self.value(x), k, stride)?;
        self.push(Op::AvgPool { x, k, stride }, out, &[x], "avg_pool2d")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (out, cols, geom) = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Conv { x, w, b, cols, geom }, out, &inputs, "conv2d")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), out, &[x], "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), perm)?;
        self.push(Op::Permute { x, perm: perm.to_vec() }, out, &[x], "permute")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out, &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / S::of(v.len() as f64));
        self.push(Op::Mean(x), out, &[x], "mean")
    }

    /// Mean over the leading axis: `[n × rest…] → [rest…]`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() < 2 {
            return Err(Error::Invalid(format!("mean_axis0 needs rank ≥ 2, got {:?}", v.shape())));
        }
        let n = v.shape()[0];
        let inner = v.len() / n;
        let mut out = vec![S::zero(); inner];
        for chunk in v.data().chunks_exact(inner) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        let inv = S::one() / S::of(n as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::raw(v.shape()[1..].to_vec(), out);
        self.push(Op::MeanAxis0(x), out, &[x], "mean_axis0")
    }

    pub fn pair_dot(&mut self, q: Var, k: Var, pairs: &Arc<PairList>, heads: usize, scale: S) -> Result<Var> {
        let out = kernels::pair_dot(self.value(q), self.value(k), pairs, heads, scale)?;
        self.push(Op::PairDot { q, k, pairs: pairs.clone(), heads, scale }, out, &[q, k], "pair_dot")
    }

    pub fn segment_softmax(&mut self, x: Var, segs: &Arc<Segments>) -> Result<Var> {
        let out = kernels::segment_softmax(self.value(x), segs)?;
        self.push(Op::SegSoftmax { x, segs: segs.clone() }, out, &[x], "segment_softmax")
    }

    pub fn pair_aggregate(&mut self, w: Var, v: Var, pairs: &Arc<PairList>) -> Result<Var> {
        let out = kernels::pair_aggregate(self.value(w), self.value(v), pairs)?;
        self.push(Op::PairAggregate { w, v, pairs: pairs.clone() }, out, &[w, v], "pair_aggregate")
    }

    pub fn pair_spread(&mut self, w: Var, src: Var, pairs: &Arc<PairList>) -> Result<Var> {
        let out = kernels::pair_spread(self.value(w), self.value(src), pairs)?;
        self.push(Op::PairSpread { w, src, pairs: pairs.clone() }, out, &[w, src], "pair_spread")
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(Op::Bilinear(x), out, &[x], "bilinear_resize")
    }

    /// Mean softmax cross-entropy of `logits` rows against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        self.push(
            Op::CrossEntropy { logits, labels: labels.into(), probs },
            Tensor::scalar(loss),
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse-mode accumulation from a scalar `loss`. Gradients from a
    /// previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                for (v, d) in self.input_grads(i, &g)? {
                    if !self.nodes[v.0].needs_grad {
                        continue;
                    }
                    match &mut self.grads[v.0] {
                        Some(acc) => acc.add_assign(&d)?,
                        slot => *slot = Some(d),
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let out = &self.nodes[i].value;
        Ok(match &self.nodes[i].op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, ta, tb } => {
                let mut r = Vec::with_capacity(2);
                if wants(a) {
                    let da = if ta {
                        kernels::bmm(val(b), tb, g, true)?
                    } else {
                        kernels::bmm(g, false, val(b), !tb)?
                    };
                    r.push((a, da));
                }
                if wants(b) {
                    let db = if tb {
                        kernels::bmm(g, true, val(a), ta)?
                    } else {
                        kernels::bmm(val(a), !ta, g, false)?
                    };
                    r.push((b, db));
                }
                r
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|x| -x))],
            &Op::Mul(a, b) => vec![
                (a, g.zip_map(val(b), |x, y| x * y)?),
                (b, g.zip_map(val(a), |x, y| x * y)?),
            ],
            &Op::AddRow { x, row } => {
                let c = val(row).len();
                let mut dr = vec![S::zero(); c];
                for chunk in g.data().chunks_exact(c) {
                    for (d, &v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                vec![(x, g.clone()), (row, Tensor::raw(vec![c], dr))]
            }
            &Op::MulRow { x, row } => {
                let (xv, rv) = (val(x), val(row));
                let c = rv.len();
                let mut dx = g.clone();
                let mut dr = vec![S::zero(); c];
                for (gc, (xc, dc)) in g
                    .data()
                    .chunks_exact(c)
                    .zip(xv.data().chunks_exact(c).zip(dx.data_mut().chunks_exact_mut(c)))
                {
                    for j in 0..c {
                        dr[j] += gc[j] * xc[j];
                        dc[j] = gc[j] * rv.data()[j];
                    }
                }
                vec![(x, dx), (row, Tensor::raw(vec![c], dr))]
            }
            &Op::Scale { x, c } => vec![(x, g.map(|v| v * c))],
            &Op::Softmax { x, axis } => vec![(x, kernels::softmax_backward(out, g, axis))],
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, val(*gamma));
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            &Op::Gelu(x) => vec![(x, g.zip_map(val(x), |gv, xv| gv * kernels::gelu_grad(xv))?)],
            &Op::AvgPool { x, k, stride } => {
                vec![(x, kernels::avg_pool2d_backward(g, val(x).shape(), k, stride))]
            }
            Op::Conv { x, w, b, cols, geom } => {
                let g2 = Tensor::raw(vec![geom.oh * geom.ow, geom.cout], g.data().to_vec());
                let mut r = Vec::with_capacity(3);
                if wants(*w) {
                    let dw = kernels::bmm(cols, true, &g2, false)?;
                    r.push((*w, dw.reshape(val(*w).shape().to_vec())?));
                }
                if wants(*x) {
                    let wmat = Tensor::raw(vec![cols.last_dim(), geom.cout], val(*w).data().to_vec());
                    let dcols = kernels::bmm(&g2, false, &wmat, true)?;
                    r.push((*x, kernels::col2im(&dcols, geom)));
                }
                if let Some(b) = *b {
                    let mut db = vec![S::zero(); geom.cout];
                    for row in g2.rows() {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    r.push((b, Tensor::raw(vec![geom.cout], db)));
                }
                r
            }
            &Op::Reshape(x) => vec![(x, g.clone().reshape(val(x).shape().to_vec())?)],
            Op::Permute { x, perm } => vec![(*x, kernels::permute(g, &kernels::inverse_perm(perm))?)],
            &Op::Sum(x) => vec![(x, Tensor::full(val(x).shape().to_vec(), g.item()))],
            &Op::Mean(x) => {
                let n = S::of(val(x).len() as f64);
                vec![(x, Tensor::full(val(x).shape().to_vec(), g.item() / n))]
            }
            &Op::MeanAxis0(x) => {
                let shape = val(x).shape().to_vec();
                let inv = S::one() / S::of(shape[0] as f64);
                let scaled: Vec<S> = g.data().iter().map(|&v| v * inv).collect();
                let data = scaled.iter().copied().cycle().take(val(x).len()).collect();
                vec![(x, Tensor::raw(shape, data))]
            }
            Op::PairDot { q, k, pairs, heads, scale } => {
                let (dq, dk) = kernels::pair_dot_backward(g, val(*q), val(*k), pairs, *heads, *scale);
                vec![(*q, dq), (*k, dk)]
            }
            Op::SegSoftmax { x, segs } => vec![(*x, kernels::segment_softmax_backward(out, g, segs))],
            Op::PairAggregate { w, v, pairs } => {
                let (dw, dv) = kernels::pair_aggregate_backward(g, val(*w), val(*v), pairs);
                vec![(*w, dw), (*v, dv.reshape(val(*v).shape().to_vec())?)]
            }
            Op::PairSpread { w, src, pairs } => {
                let (dw, ds) = kernels::pair_spread_backward(g, val(*w), val(*src), pairs);
                vec![(*w, dw), (*src, ds)]
            }
            &Op::Bilinear(x) => vec![(x, kernels::bilinear_backward(g, val(x).shape()))],
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.last_dim();
                let n = probs.len() / c;
                let s = g.item() / S::of(n as f64);
                let mut d = probs.clone();
                for (row, &l) in d.data_mut().chunks_exact_mut(c).zip(labels.iter()) {
                    row[l as usize] -= S::one();
                    row.iter_mut().for_each(|v| *v *= s);
                }
                vec![(*logits, d)]
            }
        })
    }
}
