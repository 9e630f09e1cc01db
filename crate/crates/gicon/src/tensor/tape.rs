//! Recording tape for reverse-mode differentiation.
//!
//! Ops append nodes in execution order, which is already a topological order,
//! so the backward sweep is a single reverse pass that visits each node once,
//! after all of its consumers. Gradients are only propagated through nodes
//! that can reach a trainable leaf.

use std::rc::Rc;

use super::linalg::{mm_acc, mm_nt_acc, mm_tn_acc};
use super::{Real, Tensor, TensorError};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean keep-mask for softmax. `true` entries participate; `false`
/// entries contribute exactly zero probability and receive zero gradient.
#[derive(Debug, Clone)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != keep.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mask",
                detail: format!("shape {:?} vs {} entries", shape, keep.len()),
            });
        }
        Ok(Mask { shape, keep })
    }

    /// Strict causal mask over a length-`s` sequence: position i may attend
    /// to positions j <= i.
    pub fn causal(s: usize) -> Self {
        let mut keep = vec![false; s * s];
        for i in 0..s {
            for j in 0..=i {
                keep[i * s + j] = true;
            }
        }
        Mask {
            shape: vec![s, s],
            keep,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }
}

enum Op<T: Real> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Bmm {
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    /// a + cycle(b): b is repeated along the flattened data of a.
    AddBroadcast {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: T,
    },
    Gelu {
        a: TensorId,
    },
    RmsNorm {
        a: TensorId,
        gain: TensorId,
        eps: T,
    },
    MaskedSoftmax {
        logits: TensorId,
        bias: Option<TensorId>,
        mask: Option<Rc<Mask>>,
    },
    SegmentSum {
        a: TensorId,
        dst: Rc<Vec<usize>>,
    },
    GatherRows {
        a: TensorId,
        idx: Rc<Vec<usize>>,
    },
    GatherCols {
        a: TensorId,
        idx: Rc<Vec<usize>>,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    MeanRows {
        a: TensorId,
    },
    MeanAll {
        a: TensorId,
    },
    Reshape {
        a: TensorId,
    },
    Dropout {
        a: TensorId,
        rate: f64,
        seed: u64,
    },
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`TensorId`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].value.data()[0].to_f64()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a non-trainable input.
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.push(Op::Leaf, t, false)
    }

    /// Record a trainable parameter; its gradient is produced by backward.
    pub fn variable(&mut self, t: Tensor<T>) -> TensorId {
        self.push(Op::Leaf, t, true)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        mm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Matmul { a, b },
            Tensor::from_vec(vec![m, n], out).unwrap(),
            needs,
        ))
    }

    /// Batched matmul over rank-3 operands. With `transpose_b`, `b` is
    /// [batch, n, k] and each batch computes a * b^T.
    pub fn bmm(
        &mut self,
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let bad = |detail: String| TensorError::ShapeMismatch { op: "bmm", detail };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad(format!("{:?} x {:?}", sa, sb)));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            if sb[2] != k {
                return Err(bad(format!("{:?} x {:?}^T", sa, sb)));
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad(format!("{:?} x {:?}", sa, sb)));
            }
            sb[2]
        };
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ab = &da[i * m * k..(i + 1) * m * k];
                let bb = &db[i * k * n..(i + 1) * k * n];
                let cb = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    mm_nt_acc(cb, ab, bb, m, k, n);
                } else {
                    mm_acc(cb, ab, bb, m, k, n);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Bmm { a, b, transpose_b },
            Tensor::from_vec(vec![batch, m, n], out).unwrap(),
            needs,
        ))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, Tensor::from_vec(shape, data).unwrap(), needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, Tensor::from_vec(shape, data).unwrap(), needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::from_vec(shape, data).unwrap(), needs))
    }

    /// a + b with b cycled along a's flattened data (`b.len()` must divide
    /// `a.len()`). Covers per-row bias vectors and per-token offsets.
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if lb == 0 || la % lb != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                detail: format!("{la} not a multiple of {lb}"),
            });
        }
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % lb])
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::AddBroadcast { a, b },
            Tensor::from_vec(shape, data).unwrap(),
            needs,
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let c = T::from_f64(c);
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.push(Op::Scale { a, c }, Tensor::from_vec(shape, data).unwrap(), needs)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| gelu_value(x))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        self.push(Op::Gelu { a }, Tensor::from_vec(shape, data).unwrap(), needs)
    }

    /// x / sqrt(mean(x^2) + eps) over the last dim, scaled elementwise by
    /// `gain` (length = last dim).
    pub fn rms_norm(
        &mut self,
        a: TensorId,
        gain: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let d = self.value(a).last_dim();
        if d == 0 || self.value(gain).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                detail: format!(
                    "gain length {} vs last dim {}",
                    self.value(gain).len(),
                    d
                ),
            });
        }
        let eps_t = T::from_f64(eps);
        let (x, g) = (self.value(a).data(), self.value(gain).data());
        let mut out = vec![T::ZERO; x.len()];
        let inv_d = T::from_f64(1.0 / d as f64);
        for (row_x, row_o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut ms = T::ZERO;
            for &v in row_x {
                ms += v * v;
            }
            let r = (ms * inv_d + eps_t).sqrt();
            for ((o, &v), &gv) in row_o.iter_mut().zip(row_x).zip(g) {
                *o = v * gv / r;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(gain);
        Ok(self.push(
            Op::RmsNorm { a, gain, eps: eps_t },
            Tensor::from_vec(shape, out).unwrap(),
            needs,
        ))
    }

    /// Softmax over the last dim of `logits + bias`, with masked entries
    /// contributing exactly zero probability. `bias` and `mask` are cycled
    /// along the flattened data; their last dim must equal that of `logits`.
    pub fn masked_softmax(
        &mut self,
        logits: TensorId,
        bias: Option<TensorId>,
        mask: Option<Rc<Mask>>,
    ) -> Result<TensorId, TensorError> {
        let n = self.value(logits).last_dim();
        let total = self.value(logits).len();
        if n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                detail: "empty last dim".into(),
            });
        }
        if let Some(b) = bias {
            let bl = self.value(b).len();
            if bl == 0 || total % bl != 0 || self.value(b).last_dim() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    detail: format!(
                        "bias shape {:?} does not cycle into logits {:?}",
                        self.value(b).shape(),
                        self.value(logits).shape()
                    ),
                });
            }
        }
        if let Some(m) = mask.as_deref() {
            let ml = m.keep.len();
            if ml == 0 || total % ml != 0 || m.last_dim() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    detail: format!(
                        "mask shape {:?} does not cycle into logits {:?}",
                        m.shape,
                        self.value(logits).shape()
                    ),
                });
            }
        }

        let l = self.value(logits).data();
        let bd = bias.map(|b| self.value(b).data());
        let keep = mask.as_deref().map(|m| m.keep.as_slice());
        let mut out = vec![T::ZERO; total];
        for row in 0..total / n {
            let base = row * n;
            // max over unmasked entries only, so masked logits can never
            // influence the row
            let mut max: Option<T> = None;
            for j in 0..n {
                let f = base + j;
                if keep.map_or(true, |k| k[f % k.len()]) {
                    let v = l[f] + bd.map_or(T::ZERO, |b| b[f % b.len()]);
                    max = Some(match max {
                        None => v,
                        Some(m) => m.maximum(v),
                    });
                }
            }
            let max = max.ok_or(TensorError::FullyMaskedRow { row })?;
            let mut z = T::ZERO;
            for j in 0..n {
                let f = base + j;
                if keep.map_or(true, |k| k[f % k.len()]) {
                    let v = l[f] + bd.map_or(T::ZERO, |b| b[f % b.len()]);
                    let e = (v - max).exp();
                    out[f] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[base + j] = out[base + j] / z;
            }
        }
        let shape = self.value(logits).shape().to_vec();
        let needs = self.needs(logits) || bias.map_or(false, |b| self.needs(b));
        Ok(self.push(
            Op::MaskedSoftmax { logits, bias, mask },
            Tensor::from_vec(shape, out).unwrap(),
            needs,
        ))
    }

    /// Row i of the output is the sum, in edge-list order, of input rows
    /// whose `dst` is i. Rows with no incoming entries are zero.
    pub fn segment_sum(
        &mut self,
        a: TensorId,
        dst: Rc<Vec<usize>>,
        n_segments: usize,
    ) -> Result<TensorId, TensorError> {
        let rows = self.value(a).rows();
        let rl = self.value(a).row_len();
        if dst.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "segment_sum",
                detail: format!("{} dst indices for {} rows", dst.len(), rows),
            });
        }
        if let Some(&bad) = dst.iter().find(|&&d| d >= n_segments) {
            return Err(TensorError::IndexOutOfRange {
                op: "segment_sum",
                index: bad,
                bound: n_segments,
            });
        }
        let x = self.value(a).data();
        let mut out = vec![T::ZERO; n_segments * rl];
        for (e, &d) in dst.iter().enumerate() {
            let src = &x[e * rl..(e + 1) * rl];
            let dstrow = &mut out[d * rl..(d + 1) * rl];
            for (o, &v) in dstrow.iter_mut().zip(src) {
                *o += v;
            }
        }
        let mut shape = self.value(a).shape().to_vec();
        shape[0] = n_segments;
        let needs = self.needs(a);
        Ok(self.push(
            Op::SegmentSum { a, dst },
            Tensor::from_vec(shape, out).unwrap(),
            needs,
        ))
    }

    /// Select rows by index (duplicates allowed; backward scatter-adds).
    pub fn gather_rows(
        &mut self,
        a: TensorId,
        idx: Rc<Vec<usize>>,
    ) -> Result<TensorId, TensorError> {
        let rows = self.value(a).rows();
        let rl = self.value(a).row_len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let x = self.value(a).data();
        let mut out = vec![T::ZERO; idx.len() * rl];
        for (o, &i) in idx.iter().enumerate() {
            out[o * rl..(o + 1) * rl].copy_from_slice(&x[i * rl..(i + 1) * rl]);
        }
        let mut shape = self.value(a).shape().to_vec();
        shape[0] = idx.len();
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherRows { a, idx },
            Tensor::from_vec(shape, out).unwrap(),
            needs,
        ))
    }

    /// Select columns of a rank-2 tensor by index.
    pub fn gather_cols(
        &mut self,
        a: TensorId,
        idx: Rc<Vec<usize>>,
    ) -> Result<TensorId, TensorError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_cols",
                detail: format!("expected rank 2, got {:?}", shape),
            });
        }
        let (m, n) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_cols",
                index: bad,
                bound: n,
            });
        }
        let x = self.value(a).data();
        let p = idx.len();
        let mut out = vec![T::ZERO; m * p];
        for r in 0..m {
            for (o, &j) in idx.iter().enumerate() {
                out[r * p + o] = x[r * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherCols { a, idx },
            Tensor::from_vec(vec![m, p], out).unwrap(),
            needs,
        ))
    }

    /// Stack along the first dim; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let trail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).shape()[1..] != trail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!(
                        "trailing dims {:?} vs {:?}",
                        &self.value(p).shape()[1..],
                        trail
                    ),
                });
            }
            rows += self.value(p).rows();
        }
        let rl: usize = trail.iter().product();
        let mut out = Vec::with_capacity(rows * rl);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trail);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            Tensor::from_vec(shape, out).unwrap(),
            needs,
        ))
    }

    /// Concatenate rank-2 tensors along columns; row counts must agree.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("part shape {:?}, expected {} rows rank-2", s, m),
                });
            }
            widths.push(s[1]);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![T::ZERO; m * n];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p).data();
            for r in 0..m {
                out[r * n + col..r * n + col + w].copy_from_slice(&x[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::from_vec(vec![m, n], out).unwrap(),
            needs,
        ))
    }

    /// Mean over the first dim of a rank-2 tensor: [n, d] -> [1, d].
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_rows",
                detail: format!("{:?}", s),
            });
        }
        let (n, d) = (s[0], s[1]);
        let x = self.value(a).data();
        let inv = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::ZERO; d];
        for row in x.chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::MeanRows { a },
            Tensor::from_vec(vec![1, d], out).unwrap(),
            needs,
        ))
    }

    /// Mean of all elements: -> [1].
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let len = self.value(a).len();
        if len == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_all",
                detail: "empty input".into(),
            });
        }
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let mean = acc * T::from_f64(1.0 / len as f64);
        let needs = self.needs(a);
        Ok(self.push(Op::MeanAll { a }, Tensor::scalar(mean), needs))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape { a }, t, needs))
    }

    /// Inverted dropout with an explicit seed; the mask is regenerated from
    /// the seed in backward. Callers skip this op entirely in eval mode.
    pub fn dropout(&mut self, a: TensorId, rate: f64, seed: u64) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                detail: format!("rate {rate} outside [0,1)"),
            });
        }
        let x = self.value(a).data();
        let mut out = vec![T::ZERO; x.len()];
        dropout_apply(&mut out, x, rate, seed);
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Op::Dropout { a, rate, seed },
            Tensor::from_vec(shape, out).unwrap(),
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that reaches a trainable leaf (including intermediates).
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                len: self.value(loss).len(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            let Some(dout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.step_backward(id, &dout, &mut grads);
            grads[id] = Some(dout);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|v| Tensor::from_vec(self.nodes[i].value.shape().to_vec(), v).unwrap())
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], target: usize, len: usize) -> &mut Vec<T> {
        if grads[target].is_none() {
            grads[target] = Some(vec![T::ZERO; len]);
        }
        grads[target].as_mut().unwrap()
    }

    fn step_backward(&self, id: usize, dout: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let da = Self::accumulate(grads, a.0, m * k);
                    mm_nt_acc(da, dout, bv.data(), m, n, k);
                }
                if self.needs(*b) {
                    let db = Self::accumulate(grads, b.0, k * n);
                    mm_tn_acc(db, av.data(), dout, m, k, n);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *transpose_b {
                    bv.shape()[1]
                } else {
                    bv.shape()[2]
                };
                let need_a = self.needs(*a);
                let need_b = self.needs(*b);
                if need_a {
                    Self::accumulate(grads, a.0, batch * m * k);
                }
                if need_b {
                    Self::accumulate(grads, b.0, batch * k * n);
                }
                for i in 0..batch {
                    let dc = &dout[i * m * n..(i + 1) * m * n];
                    if need_a {
                        let da_all = grads[a.0].as_mut().unwrap();
                        let da = &mut da_all[i * m * k..(i + 1) * m * k];
                        let bb = &bv.data()[i * bv.shape()[1] * bv.shape()[2]
                            ..(i + 1) * bv.shape()[1] * bv.shape()[2]];
                        if *transpose_b {
                            // c = a b^T  =>  da += dc * b
                            mm_acc(da, dc, bb, m, n, k);
                        } else {
                            mm_nt_acc(da, dc, bb, m, n, k);
                        }
                    }
                    if need_b {
                        let ab = &av.data()[i * m * k..(i + 1) * m * k];
                        let db_all = grads[b.0].as_mut().unwrap();
                        let blen = bv.shape()[1] * bv.shape()[2];
                        let db = &mut db_all[i * blen..(i + 1) * blen];
                        if *transpose_b {
                            // c = a b^T  =>  db += dc^T * a
                            mm_tn_acc(db, dc, ab, m, n, k);
                        } else {
                            mm_tn_acc(db, ab, dc, m, k, n);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for (t, sign) in [(a, false), (b, false)] {
                    let _ = sign;
                    if self.needs(*t) {
                        let g = Self::accumulate(grads, t.0, dout.len());
                        for (gv, &d) in g.iter_mut().zip(dout) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    let g = Self::accumulate(grads, a.0, dout.len());
                    for (gv, &d) in g.iter_mut().zip(dout) {
                        *gv += d;
                    }
                }
                if self.needs(*b) {
                    let g = Self::accumulate(grads, b.0, dout.len());
                    for (gv, &d) in g.iter_mut().zip(dout) {
                        *gv -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    let g = Self::accumulate(grads, a.0, dout.len());
                    for ((gv, &d), &bv) in g.iter_mut().zip(dout).zip(bd) {
                        *gv += d * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let g = Self::accumulate(grads, b.0, dout.len());
                    for ((gv, &d), &av) in g.iter_mut().zip(dout).zip(ad) {
                        *gv += d * av;
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.needs(*a) {
                    let g = Self::accumulate(grads, a.0, dout.len());
                    for (gv, &d) in g.iter_mut().zip(dout) {
                        *gv += d;
                    }
                }
                if self.needs(*b) {
                    let bl = self.value(*b).len();
                    let g = Self::accumulate(grads, b.0, bl);
                    for (f, &d) in dout.iter().enumerate() {
                        g[f % bl] += d;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let g = Self::accumulate(grads, a.0, dout.len());
                    for (gv, &d) in g.iter_mut().zip(dout) {
                        *gv += d * *c;
                    }
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let g = Self::accumulate(grads, a.0, dout.len());
                    for ((gv, &d), &xv) in g.iter_mut().zip(dout).zip(x) {
                        *gv += d * gelu_derivative(xv);
                    }
                }
            }
            Op::RmsNorm { a, gain, eps } => {
                let d = self.value(*a).last_dim();
                let x = self.value(*a).data();
                let gn = self.value(*gain).data();
                let inv_d = T::from_f64(1.0 / d as f64);
                let need_a = self.needs(*a);
                let need_g = self.needs(*gain);
                if need_a {
                    Self::accumulate(grads, a.0, x.len());
                }
                if need_g {
                    Self::accumulate(grads, gain.0, d);
                }
                for row in 0..x.len() / d {
                    let xs = &x[row * d..(row + 1) * d];
                    let ds = &dout[row * d..(row + 1) * d];
                    let mut ms = T::ZERO;
                    for &v in xs {
                        ms += v * v;
                    }
                    let r = (ms * inv_d + *eps).sqrt();
                    let r3 = r * r * r;
                    let mut q = T::ZERO;
                    for j in 0..d {
                        q += ds[j] * gn[j] * xs[j];
                    }
                    if need_a {
                        let ga = grads[a.0].as_mut().unwrap();
                        for j in 0..d {
                            ga[row * d + j] += ds[j] * gn[j] / r - xs[j] * q * inv_d / r3;
                        }
                    }
                    if need_g {
                        let gg = grads[gain.0].as_mut().unwrap();
                        for j in 0..d {
                            gg[j] += ds[j] * xs[j] / r;
                        }
                    }
                }
            }
            Op::MaskedSoftmax { logits, bias, mask } => {
                let p = self.nodes[id].value.data();
                let n = self.nodes[id].value.last_dim();
                let _ = mask;
                let need_l = self.needs(*logits);
                let need_b = bias.map_or(false, |b| self.needs(b));
                if need_l {
                    Self::accumulate(grads, logits.0, p.len());
                }
                if let (true, Some(b)) = (need_b, bias) {
                    let bl = self.value(*b).len();
                    Self::accumulate(grads, b.0, bl);
                }
                for row in 0..p.len() / n {
                    let base = row * n;
                    let ps = &p[base..base + n];
                    let ds = &dout[base..base + n];
                    let mut dot = T::ZERO;
                    for j in 0..n {
                        dot += ds[j] * ps[j];
                    }
                    for j in 0..n {
                        // masked entries have p = 0, so their logit grad is 0
                        let dl = ps[j] * (ds[j] - dot);
                        if need_l {
                            grads[logits.0].as_mut().unwrap()[base + j] += dl;
                        }
                        if let (true, Some(b)) = (need_b, bias) {
                            let bl = self.value(*b).len();
                            grads[b.0].as_mut().unwrap()[(base + j) % bl] += dl;
                        }
                    }
                }
            }
            Op::SegmentSum { a, dst } => {
                if self.needs(*a) {
                    let rl = self.value(*a).row_len();
                    let g = Self::accumulate(grads, a.0, self.value(*a).len());
                    for (e, &d) in dst.iter().enumerate() {
                        let src = &dout[d * rl..(d + 1) * rl];
                        let dg = &mut g[e * rl..(e + 1) * rl];
                        for (o, &v) in dg.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let rl = self.value(*a).row_len();
                    let g = Self::accumulate(grads, a.0, self.value(*a).len());
                    for (o, &i) in idx.iter().enumerate() {
                        let src = &dout[o * rl..(o + 1) * rl];
                        let dg = &mut g[i * rl..(i + 1) * rl];
                        for (gv, &v) in dg.iter_mut().zip(src) {
                            *gv += v;
                        }
                    }
                }
            }
            Op::GatherCols { a, idx } => {
                if self.needs(*a) {
                    let s = self.value(*a).shape();
                    let (m, n) = (s[0], s[1]);
                    let p = idx.len();
                    let g = Self::accumulate(grads, a.0, m * n);
                    for r in 0..m {
                        for (o, &j) in idx.iter().enumerate() {
                            g[r * n + j] += dout[r * p + o];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let g = Self::accumulate(grads, p.0, len);
                        for (gv, &d) in g.iter_mut().zip(&dout[offset..offset + len]) {
                            *gv += d;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.value(parts[0]).rows();
                let n: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.needs(p) {
                        let g = Self::accumulate(grads, p.0, m * w);
                        for r in 0..m {
                            for j in 0..w {
                                g[r * w + j] += dout[r * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::MeanRows { a } => {
                if self.needs(*a) {
                    let s = self.value(*a).shape();
                    let (n, d) = (s[0], s[1]);
                    let inv = T::from_f64(1.0 / n as f64);
                    let g = Self::accumulate(grads, a.0, n * d);
                    for r in 0..n {
                        for j in 0..d {
                            g[r * d + j] += dout[j] * inv;
                        }
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let len = self.value(*a).len();
                    let inv = T::from_f64(1.0 / len as f64);
                    let d = dout[0] * inv;
                    let g = Self::accumulate(grads, a.0, len);
                    for gv in g.iter_mut() {
                        *gv += d;
                    }
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    let g = Self::accumulate(grads, a.0, dout.len());
                    for (gv, &d) in g.iter_mut().zip(dout) {
                        *gv += d;
                    }
                }
            }
            Op::Dropout { a, rate, seed } => {
                if self.needs(*a) {
                    let g = Self::accumulate(grads, a.0, dout.len());
                    dropout_backward(g, dout, *rate, *seed);
                }
            }
        }
    }
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_value<T: Real>(x: T) -> T {
    let s = T::from_f64(GELU_S);
    let c = T::from_f64(GELU_C);
    let u = s * (x + c * x * x * x);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + u.tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let s = T::from_f64(GELU_S);
    let c = T::from_f64(GELU_C);
    let three = T::from_f64(3.0);
    let half = T::from_f64(0.5);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * s * (T::ONE + three * c * x * x)
}

fn dropout_apply<T: Real>(out: &mut [T], x: &[T], rate: f64, seed: u64) {
    let mut rng = Rng::seed_from(seed);
    let scale = T::from_f64(1.0 / (1.0 - rate));
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if rng.next_f64() >= rate {
            v * scale
        } else {
            T::ZERO
        };
    }
}

fn dropout_backward<T: Real>(g: &mut [T], dout: &[T], rate: f64, seed: u64) {
    let mut rng = Rng::seed_from(seed);
    let scale = T::from_f64(1.0 / (1.0 - rate));
    for (gv, &d) in g.iter_mut().zip(dout) {
        if rng.next_f64() >= rate {
            *gv += d * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(vec![rows, cols], vals).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t2(2, 2, &[3.0, -1.0, 2.5, 7.0]));
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(2, 1, &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let a = tape.constant(t2(2, 3, &[1.0; 6]));
        let c = tape.matmul(z, a).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t2(2, 3, &[0.0; 6]));
        let b = tape.constant(t2(2, 2, &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t2(1, 2, &[0.0, 0.0]));
        let p = tape.masked_softmax(l, None, None).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_mask_zeroes_entry() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t2(1, 2, &[0.0, 0.0]));
        let mask = Rc::new(Mask::new(vec![1, 2], vec![true, false]).unwrap());
        let p = tape.masked_softmax(l, None, Some(mask)).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_bias_hand_case() {
        // logits [0,0], bias [ln 2, 0] -> [2/3, 1/3]
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t2(1, 2, &[0.0, 0.0]));
        let b = tape.constant(t2(1, 2, &[2.0_f64.ln(), 0.0]));
        let p = tape.masked_softmax(l, Some(b), None).unwrap();
        let d = tape.value(p).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t2(2, 2, &[0.0; 4]));
        let mask =
            Rc::new(Mask::new(vec![2, 2], vec![true, true, false, false]).unwrap());
        let err = tape.masked_softmax(l, None, Some(mask)).unwrap_err();
        assert!(matches!(err, TensorError::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_exactly_zero() {
        let mut rng = crate::rng::Rng::seed_from(9);
        for _ in 0..20 {
            let n = 2 + rng.below(6);
            let rows = 1 + rng.below(4);
            let logits: Vec<f64> = (0..rows * n).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let mut keep = vec![false; n];
            // keep at least one
            for k in keep.iter_mut() {
                *k = rng.next_f64() < 0.7;
            }
            keep[rng.below(n)] = true;
            let mut tape = Tape::<f64>::new();
            let l = tape.constant(t2(rows, n, &logits));
            let mask = Rc::new(Mask::new(vec![1, n], keep.clone()).unwrap());
            let p = tape.masked_softmax(l, None, Some(mask)).unwrap();
            for r in 0..rows {
                let row = &tape.value(p).data()[r * n..(r + 1) * n];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
                for (j, &v) in row.iter().enumerate() {
                    if !keep[j] {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_logit_value_cannot_influence_row() {
        // causality depends on this: a masked entry's logit (and bias) must
        // leave the row's output bitwise unchanged
        let mut tape = Tape::<f64>::new();
        let l1 = tape.constant(t2(1, 3, &[0.3, -0.2, 0.0]));
        let l2 = tape.constant(t2(1, 3, &[0.3, -0.2, 1e6]));
        let mask = Rc::new(Mask::new(vec![1, 3], vec![true, true, false]).unwrap());
        let p1 = tape.masked_softmax(l1, None, Some(mask.clone())).unwrap();
        let p2 = tape.masked_softmax(l2, None, Some(mask)).unwrap();
        assert_eq!(tape.value(p1).data(), tape.value(p2).data());
    }

    #[test]
    fn rms_norm_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(Tensor::filled(vec![2], 1.0));

        let x = tape.constant(t2(1, 2, &[3.0, 4.0]));
        let y = tape.rms_norm(x, gain, 1e-30).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 3.0 / 12.5_f64.sqrt()).abs() < 1e-12);
        assert!((d[1] - 4.0 / 12.5_f64.sqrt()).abs() < 1e-12);
        assert!((d[0] - 0.8485).abs() < 1e-4);
        assert!((d[1] - 1.1314).abs() < 1e-4);

        let c = tape.constant(t2(1, 2, &[-7.0, -7.0]));
        let y2 = tape.rms_norm(c, gain, 1e-30).unwrap();
        for &v in tape.value(y2).data() {
            assert!((v + 1.0).abs() < 1e-12); // sign(c) = -1
        }

        let z = tape.constant(t2(1, 2, &[0.0, 0.0]));
        let y3 = tape.rms_norm(z, gain, 1e-6).unwrap();
        assert_eq!(tape.value(y3).data(), &[0.0, 0.0]);
    }

    #[test]
    fn segment_sum_hand_and_edge_cases() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(t2(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        let out = tape
            .segment_sum(m, Rc::new(vec![0, 0, 1]), 2)
            .unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 3.0, 3.0, 3.0]);

        // isolated segment gets zeros
        let one = tape.constant(t2(1, 2, &[5.0, -2.0]));
        let out2 = tape.segment_sum(one, Rc::new(vec![0]), 3).unwrap();
        assert_eq!(tape.value(out2).data(), &[5.0, -2.0, 0.0, 0.0, 0.0, 0.0]);

        // single edge identity
        let out3 = tape.segment_sum(one, Rc::new(vec![0]), 1).unwrap();
        assert_eq!(tape.value(out3).data(), &[5.0, -2.0]);

        // out-of-range dst
        let err = tape.segment_sum(one, Rc::new(vec![4]), 2).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { .. }));
    }

    #[test]
    fn segment_sum_matches_naive_double_loop() {
        let mut rng = crate::rng::Rng::seed_from(21);
        for _ in 0..20 {
            let nodes = 1 + rng.below(50);
            let edges = rng.below(200);
            let d = 1 + rng.below(4);
            let msgs: Vec<f64> = (0..edges * d).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let dst: Vec<usize> = (0..edges).map(|_| rng.below(nodes)).collect();

            // naive: per node, scan the edge list in order
            let mut want = vec![0.0; nodes * d];
            for node in 0..nodes {
                for (e, &de) in dst.iter().enumerate() {
                    if de == node {
                        for j in 0..d {
                            want[node * d + j] += msgs[e * d + j];
                        }
                    }
                }
            }

            let mut tape = Tape::<f64>::new();
            let m = tape
                .constant(Tensor::from_f64s(vec![edges, d], &msgs).unwrap());
            let out = tape.segment_sum(m, Rc::new(dst), nodes).unwrap();
            assert_eq!(tape.value(out).data(), &want[..], "exact equality required");
        }
    }

    #[test]
    fn backward_square_function() {
        // f(x) = x^2 at x = 3 -> grad 6
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t2(1, 2, &[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { len: 2 }));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn dropout_deterministic_and_inverted() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(vec![1000], 1.0));
        let a = tape.dropout(x, 0.4, 77).unwrap();
        let b = tape.dropout(x, 0.4, 77).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
        let mean: f64 =
            tape.value(a).data().iter().sum::<f64>() / tape.value(a).len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "inverted dropout keeps mean ~1, got {mean}");
        for &v in tape.value(a).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = crate::rng::Rng::seed_from(4);
            let vals: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(t2(3, 4, &vals));
            let g = tape.constant(Tensor::filled(vec![4], 1.0));
            let n = tape.rms_norm(a, g, 1e-6).unwrap();
            let s = tape.masked_softmax(n, None, None).unwrap();
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_and_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = tape.gather_rows(a, Rc::new(vec![0, 1])).unwrap();
        let bottom = tape.gather_rows(a, Rc::new(vec![2])).unwrap();
        let whole = tape.concat_rows(&[top, bottom]).unwrap();
        assert_eq!(tape.value(whole).data(), tape.value(a).data());

        let left = tape.gather_cols(a, Rc::new(vec![0])).unwrap();
        let right = tape.gather_cols(a, Rc::new(vec![1])).unwrap();
        let glued = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(glued).data(), tape.value(a).data());
    }

    #[test]
    fn mean_ops() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let mr = tape.mean_rows(a).unwrap();
        assert_eq!(tape.value(mr).data(), &[2.0, 3.0]);
        let ma = tape.mean_all(a).unwrap();
        assert_eq!(tape.value(ma).data(), &[2.5]);
    }
}
