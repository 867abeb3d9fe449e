//! Reverse-mode tape.
//!
//! Every op appends one node holding its forward value. Inputs always precede
//! their consumers, so the node vector is already a topological order and
//! [`Tape::backward`] walks it in reverse. Gradient accumulation order is the
//! tape order, which makes gradients bit-reproducible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{lit, matmul_nt_raw, matmul_raw, matmul_tn_raw, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add { a: NodeId, b: NodeId, broadcast: bool },
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Reshape(NodeId),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    SliceCols(NodeId, usize),
    Mean(NodeId),
    MeanRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(NodeId),
    MaskedSoftmax(NodeId),
    Mse { pred: NodeId, target: Tensor<F> },
    CrossEntropy { logits: NodeId, probs: Vec<F>, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation. Single writer; build one tape per sample.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar with respect to every node that required one.
/// A missing entry means the gradient is zero.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar<F: Real>(x: F) -> F {
    let k: F = lit(GELU_K);
    let c: F = lit(GELU_C);
    let half: F = lit(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let k: F = lit(GELU_K);
    let c: F = lit(GELU_C);
    let half: F = lit(0.5);
    let three: F = lit(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + three * c * x * x)
}

fn check_finite<F: Real>(t: &Tensor<F>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn require_2d<F: Real>(t: &Tensor<F>, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{op} expects a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable input (parameter or pixel data).
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = require_2d(self.value(a), "matmul")?;
        let (k2, n) = require_2d(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        check_finite(&out, "matmul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. `b` may also be a row vector (`[n]` or `[1, n]`)
    /// broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            false
        } else {
            let (_, n) = va.dims2();
            let row_like = match vb.shape() {
                [x] => *x == n,
                [1, x] => *x == n,
                _ => false,
            };
            if !row_like || va.shape().is_empty() {
                return Err(Error::Shape(format!(
                    "add {:?} + {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
            true
        };
        let out = if broadcast {
            let (_, n) = va.dims2();
            let bd = vb.data();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % n])
                .collect();
            Tensor::new(va.shape(), data)?
        } else {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(va.shape(), data)?
        };
        check_finite(&out, "add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b, broadcast }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        check_finite(&out, "mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * s);
        check_finite(&out, "scale")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = require_2d(va, "transpose")?;
        let out = Tensor::new(&[n, m], transpose_raw(va.data(), m, n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = require_2d(va, "gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Shape(format!("gather_rows index {r} out of {m} rows")));
            }
            data.extend_from_slice(va.row(r));
        }
        let out = Tensor::new(&[rows.len(), n], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Contract("concat needs parts and axis 0 or 1".into()));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| require_2d(self.value(p), "concat"))
            .collect::<Result<_>>()?;
        let out = if axis == 0 {
            let n = dims[0].1;
            if dims.iter().any(|d| d.1 != n) {
                return Err(Error::Shape(format!("concat rows with widths {dims:?}")));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            let m = dims.iter().map(|d| d.0).sum();
            Tensor::new(&[m, n], data)?
        } else {
            let m = dims[0].0;
            if dims.iter().any(|d| d.0 != m) {
                return Err(Error::Shape(format!("concat cols with heights {dims:?}")));
            }
            let n: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(&[m, n], data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = require_2d(va, "slice_cols")?;
        if start + width > n {
            return Err(Error::Shape(format!("slice_cols {start}+{width} of {n}")));
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&va.row(i)[start..start + width]);
        }
        let out = Tensor::new(&[m, width], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: F = va.data().iter().copied().sum();
        let out = Tensor::scalar(s / lit(va.len() as f64));
        check_finite(&out, "mean")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Column means of a matrix, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = require_2d(va, "mean_rows")?;
        if m == 0 {
            return Err(Error::Contract("mean_rows of zero rows".into()));
        }
        let mut data = vec![F::zero(); n];
        for i in 0..m {
            for (o, &x) in data.iter_mut().zip(va.row(i)) {
                *o = *o + x;
            }
        }
        let inv: F = lit(1.0 / m as f64);
        data.iter_mut().for_each(|v| *v = *v * inv);
        let out = Tensor::new(&[1, n], data)?;
        check_finite(&out, "mean_rows")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Per-row layer normalization over the last axis with population variance.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> Result<NodeId> {
        let vx = self.value(x);
        let (m, n) = require_2d(vx, "layernorm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Shape(format!("layernorm affine params must have {n} entries")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_n: F = lit(1.0 / n as f64);
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = vx.row(i);
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        check_finite(&out, "layernorm")?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(gelu_scalar);
        check_finite(&out, "gelu")?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    /// Row-wise softmax where entries with `mask == false` get probability
    /// exactly zero. `mask` is row-major with the same element count as the
    /// score matrix; every row needs at least one admissible entry.
    pub fn masked_softmax(&mut self, scores: NodeId, mask: &Arc<[bool]>) -> Result<NodeId> {
        let vs = self.value(scores);
        let (m, n) = require_2d(vs, "masked_softmax")?;
        if mask.len() != m * n {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {m}x{n} score matrix",
                mask.len()
            )));
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = vs.row(i);
            let mrow = &mask[i * n..(i + 1) * n];
            let mut max = F::neg_infinity();
            for (&v, &ok) in row.iter().zip(mrow) {
                if ok && v > max {
                    max = v;
                }
            }
            if max == F::neg_infinity() {
                return Err(Error::Contract(format!("attention mask row {i} admits nothing")));
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = F::zero();
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    sum = sum + e;
                }
            }
            for v in orow.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        check_finite(&out, "masked_softmax")?;
        let rg = self.rg(&[scores]);
        Ok(self.push(out, Op::MaskedSoftmax(scores), rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor<F>) -> Result<NodeId> {
        let vp = self.value(pred);
        if vp.len() != target.len() || vp.is_empty() {
            return Err(Error::Shape(format!(
                "mse prediction {:?} vs target {:?}",
                vp.shape(),
                target.shape()
            )));
        }
        let s: F = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let out = Tensor::scalar(s / lit(vp.len() as f64));
        check_finite(&out, "mse")?;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            out,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[b, k]` against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (b, k) = require_2d(vl, "cross_entropy")?;
        if labels.len() != b || b == 0 {
            return Err(Error::Shape(format!("{} labels for {b} rows", labels.len())));
        }
        let mut probs = vec![F::zero(); b * k];
        let mut loss = F::zero();
        for i in 0..b {
            if labels[i] >= k {
                return Err(Error::Contract(format!("label {} out of {k} classes", labels[i])));
            }
            let row = vl.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / sum;
            }
            loss = loss - (row[labels[i]] - max - sum.ln());
        }
        let out = Tensor::scalar(loss / lit(b as f64));
        check_finite(&out, "cross_entropy")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, delta: Tensor<F>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt_raw(gd, vb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn_raw(va.data(), gd, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::Add { a, b, broadcast } => {
                self.accumulate(grads, *a, g.clone());
                if *broadcast {
                    let vb = self.value(*b);
                    let n = vb.len();
                    let mut db = vec![F::zero(); n];
                    for (i, &x) in gd.iter().enumerate() {
                        db[i % n] = db[i % n] + x;
                    }
                    self.accumulate(grads, *b, Tensor::new(vb.shape(), db).unwrap());
                } else {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(vb.shape(), db).unwrap());
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.map(|x| x * *s));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape).unwrap());
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let d = Tensor::new(&[n, m], transpose_raw(gd, m, n)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, rows) => {
                let va = self.value(*a);
                let (_, n) = va.dims2();
                let mut d = Tensor::zeros(va.shape());
                let dd = d.data_mut();
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dd[r * n + j] = dd[r * n + j] + gd[k * n + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Concat(parts, axis) => {
                let width = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let (pm, pn) = (vp.shape()[0], vp.shape()[1]);
                    let d = if *axis == 0 {
                        gd[offset * width..(offset + pm) * width].to_vec()
                    } else {
                        let mut d = Vec::with_capacity(pm * pn);
                        for i in 0..pm {
                            d.extend_from_slice(&gd[i * width + offset..i * width + offset + pn]);
                        }
                        d
                    };
                    offset += if *axis == 0 { pm } else { pn };
                    self.accumulate(grads, p, Tensor::new(&[pm, pn], d).unwrap());
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (m, n) = (va.shape()[0], va.shape()[1]);
                let w = g.shape()[1];
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::new(&[m, n], d).unwrap());
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let v = gd[0] / lit(va.len() as f64);
                self.accumulate(grads, *a, Tensor::full(va.shape(), v));
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let (m, n) = (va.shape()[0], va.shape()[1]);
                let inv: F = lit(1.0 / m as f64);
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(gd.iter().map(|&x| x * inv));
                }
                self.accumulate(grads, *a, Tensor::new(&[m, n], d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vx = self.value(*x);
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                let mut dx = vec![F::zero(); m * n];
                let nf: F = lit(n as f64);
                for i in 0..m {
                    let gr = &gd[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut sum_dxh = F::zero();
                    let mut sum_dxh_xh = F::zero();
                    for j in 0..n {
                        dgamma[j] = dgamma[j] + gr[j] * xh[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        let dxh = gr[j] * gam[j];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                    }
                    let r = rstd[i] / nf;
                    for j in 0..n {
                        let dxh = gr[j] * gam[j];
                        dx[i * n + j] = r * (nf * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[m, n], dx).unwrap());
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(&gshape, dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(&bshape, dbeta).unwrap());
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = va
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| gv * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape(), d).unwrap());
            }
            Op::MaskedSoftmax(a) => {
                // dS = P * (dP - rowsum(dP * P)); masked entries have P = 0 exactly.
                let p = &node.value;
                let (m, n) = (p.shape()[0], p.shape()[1]);
                let pd = p.data();
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    let pr = &pd[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: F = pr.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                    for j in 0..n {
                        d[i * n + j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(&[m, n], d).unwrap());
            }
            Op::Mse { pred, target } => {
                let vp = self.value(*pred);
                let c: F = lit::<F>(2.0) * gd[0] / lit(vp.len() as f64);
                let d = vp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| c * (p - t))
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(vp.shape(), d).unwrap());
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let vl = self.value(*logits);
                let (b, k) = (vl.shape()[0], vl.shape()[1]);
                let c: F = gd[0] / lit(b as f64);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] = d[i * k + y] - F::one();
                }
                d.iter_mut().for_each(|v| *v = *v * c);
                self.accumulate(grads, *logits, Tensor::new(&[b, k], d).unwrap());
            }
        }
    }
}

fn transpose_raw<F: Real>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
