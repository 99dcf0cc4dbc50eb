//! Wengert tape: reverse-mode autodiff over dense tensors.
//!
//! Operations are recorded during the forward pass into a linear arena; the
//! backward pass walks it once in reverse. Every op validates shapes up
//! front and checks its output for NaN/Inf — a non-finite value is an error
//! at the op that produced it, never something that propagates.
//!
//! A tape is single-threaded and owns all intermediate buffers. Leaves are
//! copied in from [`Tensor`] values; gradients are read back out after
//! [`Tape::backward`].

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation, holding input handles and whatever the backward rule
/// needs that is cheaper to store than recompute.
#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    DivElem { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: S },
    AddScalar { x: NodeId },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Sqrt { x: NodeId },
    SoftmaxRows { x: NodeId },
    LogSoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: S },
    NormalizeRows { x: NodeId },
    MeanRows { x: NodeId },
    MeanAll { x: NodeId },
    SumAll { x: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize },
    GatherRows { table: NodeId, ids: Vec<usize> },
    PermuteGather { x: NodeId, idx: Vec<usize> },
    Reshape { x: NodeId },
    MulBy { x: NodeId, s: NodeId },
    DivBy { x: NodeId, s: NodeId },
    MaxConst { x: NodeId, c: S },
    Clamp01 { x: NodeId },
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

fn ensure_finite<S: Scalar>(data: &[S], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Row/column view of a rank-1 or rank-2 shape.
fn as_rows(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(Error::shape(op, format!("expected rank <= 2, got {shape:?}"))),
    }
}

fn mm<S: Scalar>(a: &[S], b: &[S], p: usize, q: usize, r: usize) -> Vec<S> {
    let mut out = vec![S::zero(); p * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * *bv;
            }
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Node access ─────────────────────────────────────────────────

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<S> {
        let n = &self.nodes[id.0];
        Tensor::from_vec(n.shape.clone(), n.data.clone()).expect("tape node is always a valid tensor")
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as a tensor shaped like the node; zeros if the node was
    /// never reached by backward.
    pub fn grad_tensor(&self, id: NodeId) -> Tensor<S> {
        let n = &self.nodes[id.0];
        let data = self.grads[id.0]
            .clone()
            .unwrap_or_else(|| vec![S::zero(); n.data.len()]);
        Tensor::from_vec(n.shape.clone(), data).expect("grad buffer matches node shape")
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ── Leaves ──────────────────────────────────────────────────────

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, rg: bool) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad: rg,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Leaf that is always tracked.
    pub fn var(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf that is never tracked (frozen weights, schedule constants).
    pub fn constant(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<S>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: S) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ── Primitive ops ───────────────────────────────────────────────

    /// `a[p×q] · b[q×r]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (p, q) = as_rows(self.shape(a), "matmul")?;
        let (q2, r) = as_rows(self.shape(b), "matmul")?;
        if q != q2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {q} vs {q2} ({:?} x {:?})", self.shape(a), self.shape(b)),
            ));
        }
        let data = mm(&self.nodes[a.0].data, &self.nodes[b.0].data, p, q, r);
        ensure_finite(&data, "matmul")?;
        let rg = self.rg2(a, b);
        Ok(self.push(vec![p, r], data, Op::Matmul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(x), "transpose")?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = src[i * d + j];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![d, n], data, Op::Transpose { x }, rg))
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op_name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        ensure_finite(&data, op_name)?;
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg2(a, b);
        Ok(self.push(shape, data, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "hadamard", |x, y| x * y, Op::Hadamard { a, b })
    }

    pub fn div_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "div", |x, y| x / y, Op::DivElem { a, b })
    }

    /// `[n×d] + [d]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, d) = as_rows(self.shape(x), "add_bias")?;
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs width {d}", self.shape(bias)),
            ));
        }
        let bdat = self.nodes[bias.0].data.clone();
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bdat[i % d])
            .collect();
        ensure_finite(&data, "add_bias")?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg2(x, bias);
        Ok(self.push(shape, data, Op::AddBias { x, bias }, rg))
    }

    fn unary(
        &mut self,
        x: NodeId,
        op_name: &'static str,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> Result<NodeId> {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        ensure_finite(&data, op_name)?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, op, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        self.unary(x, "scale", |v| v * c, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -S::one())
    }

    pub fn add_scalar(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        self.unary(x, "add_scalar", |v| v + c, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "relu", |v| v.max(S::zero()), Op::Relu { x })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp { x })
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "log", |v| v.ln(), Op::Log { x })
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "sqrt", |v| v.sqrt(), Op::Sqrt { x })
    }

    pub fn max_const(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        self.unary(x, "max_const", |v| v.max(c), Op::MaxConst { x, c })
    }

    pub fn clamp01(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(
            x,
            "clamp01",
            |v| v.max(S::zero()).min(S::one()),
            Op::Clamp01 { x },
        )
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(x), "softmax_rows")?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in 0..d {
                let e = (row[j] - mx).exp();
                data[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                data[i * d + j] /= sum;
            }
        }
        ensure_finite(&data, "softmax_rows")?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, Op::SoftmaxRows { x }, rg))
    }

    /// Row-wise log-softmax, stabilized by row-max subtraction. Exact where
    /// `log(softmax_rows(x))` would underflow.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(x), "log_softmax_rows")?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &v in row {
                sum += (v - mx).exp();
            }
            let lse = mx + sum.ln();
            for j in 0..d {
                data[i * d + j] = row[j] - lse;
            }
        }
        ensure_finite(&data, "log_softmax_rows")?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, Op::LogSoftmaxRows { x }, rg))
    }

    /// Per-row normalization to zero mean / unit variance, then affine
    /// gain + bias. `gain` and `bias` are `[d]`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(x), "layer_norm")?;
        if d < 2 {
            return Err(Error::invalid(format!(
                "layer_norm is degenerate for width {d} < 2"
            )));
        }
        if eps <= S::zero() {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs width {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let dn = s::<S>(d as f64);
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mu = row.iter().copied().fold(S::zero(), |a, v| a + v) / dn;
            let var = row
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .fold(S::zero(), |a, v| a + v)
                / dn;
            let istd = S::one() / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = g[j] * (row[j] - mu) * istd + b[j];
            }
        }
        ensure_finite(&data, "layer_norm")?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad || self.rg2(gain, bias);
        Ok(self.push(shape, data, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// Rescales each row to unit L2 norm. Errors on a (near-)zero row.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(x), "normalize_rows")?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row
                .iter()
                .map(|&v| v * v)
                .fold(S::zero(), |a, v| a + v)
                .sqrt();
            if norm < s::<S>(1e-12) {
                return Err(Error::ZeroNorm {
                    op: "normalize_rows",
                });
            }
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        ensure_finite(&data, "normalize_rows")?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, Op::NormalizeRows { x }, rg))
    }

    /// Column means: `[n×d] -> [d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(x), "mean_rows")?;
        let src = &self.nodes[x.0].data;
        let nn = s::<S>(n as f64);
        let mut data = vec![S::zero(); d];
        for i in 0..n {
            for j in 0..d {
                data[j] += src[i * d + j];
            }
        }
        for v in &mut data {
            *v /= nn;
        }
        ensure_finite(&data, "mean_rows")?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![d], data, Op::MeanRows { x }, rg))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let src = &self.nodes[x.0].data;
        let nn = s::<S>(src.len() as f64);
        let v = src.iter().copied().fold(S::zero(), |a, b| a + b) / nn;
        ensure_finite(std::slice::from_ref(&v), "mean_all")?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1], vec![v], Op::MeanAll { x }, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let src = &self.nodes[x.0].data;
        let v = src.iter().copied().fold(S::zero(), |a, b| a + b);
        ensure_finite(std::slice::from_ref(&v), "sum_all")?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![1], vec![v], Op::SumAll { x }, rg))
    }

    /// Stacks `b`'s rows after `a`'s. Widths must match.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(a), "concat_rows")?;
        let (m, d2) = as_rows(self.shape(b), "concat_rows")?;
        if d != d2 {
            return Err(Error::shape("concat_rows", format!("widths {d} vs {d2}")));
        }
        let mut data = Vec::with_capacity((n + m) * d);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.rg2(a, b);
        Ok(self.push(vec![n + m, d], data, Op::ConcatRows { a, b }, rg))
    }

    /// Rows `start..end` of a rank-2 node.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(x), "slice_rows")?;
        if start >= end || end > n {
            return Err(Error::invalid(format!(
                "slice_rows range {start}..{end} out of {n} rows"
            )));
        }
        let data = self.nodes[x.0].data[start * d..end * d].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![end - start, d], data, Op::SliceRows { x, start }, rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]` (embedding gather).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(table), "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows with empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "gather_rows index {bad} out of {n} rows"
            )));
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Element permutation/selection: `out[i] = x[idx[i]]`, reshaped to
    /// `out_shape`. Used for patch extraction and its inverse.
    pub fn permute_gather(&mut self, x: NodeId, idx: &[usize], out_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(Error::shape(
                "permute_gather",
                format!("{} indices vs shape {:?}", idx.len(), out_shape),
            ));
        }
        let src = &self.nodes[x.0].data;
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "permute_gather index {bad} out of {}",
                src.len()
            )));
        }
        let data: Vec<S> = idx.iter().map(|&i| src[i]).collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            out_shape,
            data,
            Op::PermuteGather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Same buffer under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, Op::Reshape { x }, rg))
    }

    /// Broadcast multiply by a single-element node.
    pub fn mul_by(&mut self, x: NodeId, factor: NodeId) -> Result<NodeId> {
        if self.nodes[factor.0].data.len() != 1 {
            return Err(Error::shape("mul_by", "factor must be a scalar node"));
        }
        let f = self.nodes[factor.0].data[0];
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v * f).collect();
        ensure_finite(&data, "mul_by")?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg2(x, factor);
        Ok(self.push(shape, data, Op::MulBy { x, s: factor }, rg))
    }

    /// Broadcast divide by a single-element node.
    pub fn div_by(&mut self, x: NodeId, divisor: NodeId) -> Result<NodeId> {
        if self.nodes[divisor.0].data.len() != 1 {
            return Err(Error::shape("div_by", "divisor must be a scalar node"));
        }
        let f = self.nodes[divisor.0].data[0];
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v / f).collect();
        ensure_finite(&data, "div_by")?;
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg2(x, divisor);
        Ok(self.push(shape, data, Op::DivBy { x, s: divisor }, rg))
    }

    // ── Compositions ────────────────────────────────────────────────

    /// Scaled dot-product attention `softmax(QKᵀ/√d)·V`.
    ///
    /// `Q: [a×d]`, `K: [b×d]`, `V: [b×e]` → `[a×e]`.
    pub fn sdp_attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, d) = as_rows(self.shape(q), "sdp_attention")?;
        let (bk, dk) = as_rows(self.shape(k), "sdp_attention")?;
        let (bv, _) = as_rows(self.shape(v), "sdp_attention")?;
        if d != dk {
            return Err(Error::shape(
                "sdp_attention",
                format!("query width {d} vs key width {dk}"),
            ));
        }
        if bk != bv {
            return Err(Error::shape(
                "sdp_attention",
                format!("key count {bk} vs value count {bv}"),
            ));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, S::one() / s::<S>(d as f64).sqrt())?;
        let probs = self.softmax_rows(scaled)?;
        self.matmul(probs, v)
    }

    /// Sum of element-wise products of two same-shaped nodes.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.hadamard(a, b)?;
        self.sum_all(h)
    }

    /// Sum of squares.
    pub fn squared_l2(&mut self, x: NodeId) -> Result<NodeId> {
        let h = self.hadamard(x, x)?;
        self.sum_all(h)
    }

    /// Frobenius norm as a scalar node.
    pub fn frob_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let sq = self.squared_l2(x)?;
        self.sqrt(sq)
    }

    /// Cosine similarity of two nodes viewed as flat vectors; errors on a
    /// zero-norm input.
    pub fn cosine_sim(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let n = self.nodes[u.0].data.len();
        if n != self.nodes[v.0].data.len() {
            return Err(Error::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", self.shape(u), self.shape(v)),
            ));
        }
        let u = self.reshape(u, vec![n])?;
        let v = self.reshape(v, vec![n])?;
        let nu = self.frob_norm(u)?;
        let nv = self.frob_norm(v)?;
        if self.value(nu) < s::<S>(1e-12) || self.value(nv) < s::<S>(1e-12) {
            return Err(Error::ZeroNorm { op: "cosine_sim" });
        }
        let d = self.dot(u, v)?;
        let denom = self.hadamard(nu, nv)?;
        self.div_elem(d, denom)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let diff = self.sub(a, b)?;
        let sq = self.hadamard(diff, diff)?;
        self.mean_all(sq)
    }

    /// Main-diagonal of a square rank-2 node, as `[n]`.
    pub fn diag(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = as_rows(self.shape(x), "diag")?;
        if n != d {
            return Err(Error::shape("diag", format!("not square: {n}x{d}")));
        }
        let idx: Vec<usize> = (0..n).map(|i| i * d + i).collect();
        self.permute_gather(x, &idx, vec![n])
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Each call propagates a fresh unit
    /// seed, so gradients accumulate across calls until
    /// [`Tape::zero_grads`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        work[root.0] = Some(vec![S::one()]);

        let Tape { nodes, grads } = self;
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = work[i].take() else { continue };
            backward_step(nodes, &mut work, i, &g);
            let slot = grads[i].get_or_insert_with(|| vec![S::zero(); nodes[i].data.len()]);
            for (dst, src) in slot.iter_mut().zip(&g) {
                *dst += *src;
            }
        }
        Ok(())
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], id: NodeId, f: impl FnOnce(&mut [S])) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let slot = grads[id.0].get_or_insert_with(|| vec![S::zero(); nodes[id.0].data.len()]);
    f(slot);
}

#[allow(clippy::too_many_lines)]
fn backward_step<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], i: usize, g: &[S]) {
    let (rows, cols) = match nodes[i].shape.len() {
        1 => (1, nodes[i].shape[0]),
        2 => (nodes[i].shape[0], nodes[i].shape[1]),
        _ => (1, nodes[i].data.len()),
    };
    match &nodes[i].op {
        Op::Leaf => {}

        Op::Matmul { a, b } => {
            let (p, q) = match nodes[a.0].shape.len() {
                1 => (1, nodes[a.0].shape[0]),
                _ => (nodes[a.0].shape[0], nodes[a.0].shape[1]),
            };
            let r = cols;
            let adata = &nodes[a.0].data;
            let bdata = &nodes[b.0].data;
            if nodes[a.0].requires_grad {
                // dA = G · Bᵀ
                let mut bt = vec![S::zero(); r * q];
                for x in 0..q {
                    for y in 0..r {
                        bt[y * q + x] = bdata[x * r + y];
                    }
                }
                let da = mm(g, &bt, p, r, q);
                acc(grads, nodes, *a, |dst| {
                    for (d, v) in dst.iter_mut().zip(&da) {
                        *d += *v;
                    }
                });
            }
            if nodes[b.0].requires_grad {
                // dB = Aᵀ · G
                let mut at = vec![S::zero(); q * p];
                for x in 0..p {
                    for y in 0..q {
                        at[y * p + x] = adata[x * q + y];
                    }
                }
                let db = mm(&at, g, q, p, r);
                acc(grads, nodes, *b, |dst| {
                    for (d, v) in dst.iter_mut().zip(&db) {
                        *d += *v;
                    }
                });
            }
        }

        Op::Transpose { x } => {
            // node shape is [d, n] for input [n, d]
            acc(grads, nodes, *x, |dst| {
                for i2 in 0..rows {
                    for j in 0..cols {
                        dst[j * rows + i2] += g[i2 * cols + j];
                    }
                }
            });
        }

        Op::Add { a, b } => {
            acc(grads, nodes, *a, |dst| {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += *v;
                }
            });
            acc(grads, nodes, *b, |dst| {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += *v;
                }
            });
        }

        Op::Sub { a, b } => {
            acc(grads, nodes, *a, |dst| {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += *v;
                }
            });
            acc(grads, nodes, *b, |dst| {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d -= *v;
                }
            });
        }

        Op::Hadamard { a, b } => {
            let adata = &nodes[a.0].data;
            let bdata = &nodes[b.0].data;
            acc(grads, nodes, *a, |dst| {
                for k in 0..g.len() {
                    dst[k] += g[k] * bdata[k];
                }
            });
            acc(grads, nodes, *b, |dst| {
                for k in 0..g.len() {
                    dst[k] += g[k] * adata[k];
                }
            });
        }

        Op::DivElem { a, b } => {
            let adata = &nodes[a.0].data;
            let bdata = &nodes[b.0].data;
            acc(grads, nodes, *a, |dst| {
                for k in 0..g.len() {
                    dst[k] += g[k] / bdata[k];
                }
            });
            acc(grads, nodes, *b, |dst| {
                for k in 0..g.len() {
                    dst[k] -= g[k] * adata[k] / (bdata[k] * bdata[k]);
                }
            });
        }

        Op::AddBias { x, bias } => {
            acc(grads, nodes, *x, |dst| {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += *v;
                }
            });
            acc(grads, nodes, *bias, |dst| {
                for (k, v) in g.iter().enumerate() {
                    dst[k % cols] += *v;
                }
            });
        }

        Op::Scale { x, c } => {
            acc(grads, nodes, *x, |dst| {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += *v * *c;
                }
            });
        }

        Op::AddScalar { x } => {
            acc(grads, nodes, *x, |dst| {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += *v;
                }
            });
        }

        Op::Relu { x } => {
            let xdata = &nodes[x.0].data;
            acc(grads, nodes, *x, |dst| {
                for k in 0..g.len() {
                    if xdata[k] > S::zero() {
                        dst[k] += g[k];
                    }
                }
            });
        }

        Op::Exp { x } => {
            let y = &nodes[i].data;
            acc(grads, nodes, *x, |dst| {
                for k in 0..g.len() {
                    dst[k] += g[k] * y[k];
                }
            });
        }

        Op::Log { x } => {
            let xdata = &nodes[x.0].data;
            acc(grads, nodes, *x, |dst| {
                for k in 0..g.len() {
                    dst[k] += g[k] / xdata[k];
                }
            });
        }

        Op::Sqrt { x } => {
            let y = &nodes[i].data;
            let two = s::<S>(2.0);
            acc(grads, nodes, *x, |dst| {
                for k in 0..g.len() {
                    dst[k] += g[k] / (two * y[k]);
                }
            });
        }

        Op::SoftmaxRows { x } => {
            let y = &nodes[i].data;
            acc(grads, nodes, *x, |dst| {
                for r in 0..rows {
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dotp = yrow
                        .iter()
                        .zip(grow)
                        .map(|(&a, &b)| a * b)
                        .fold(S::zero(), |a, v| a + v);
                    for j in 0..cols {
                        dst[r * cols + j] += yrow[j] * (grow[j] - dotp);
                    }
                }
            });
        }

        Op::LogSoftmaxRows { x } => {
            let y = &nodes[i].data;
            acc(grads, nodes, *x, |dst| {
                for r in 0..rows {
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let gsum = grow.iter().copied().fold(S::zero(), |a, v| a + v);
                    for j in 0..cols {
                        dst[r * cols + j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            });
        }

        Op::LayerNorm { x, gain, bias, eps } => {
            let xdata = &nodes[x.0].data;
            let gdata = &nodes[gain.0].data;
            let d = cols;
            let dn = s::<S>(d as f64);
            // Recompute per-row stats; cheaper than caching them on the node.
            let mut xhat = vec![S::zero(); rows * d];
            let mut istds = vec![S::zero(); rows];
            for r in 0..rows {
                let row = &xdata[r * d..(r + 1) * d];
                let mu = row.iter().copied().fold(S::zero(), |a, v| a + v) / dn;
                let var = row
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .fold(S::zero(), |a, v| a + v)
                    / dn;
                let istd = S::one() / (var + *eps).sqrt();
                istds[r] = istd;
                for j in 0..d {
                    xhat[r * d + j] = (row[j] - mu) * istd;
                }
            }
            acc(grads, nodes, *gain, |dst| {
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            acc(grads, nodes, *bias, |dst| {
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += g[r * d + j];
                    }
                }
            });
            acc(grads, nodes, *x, |dst| {
                for r in 0..rows {
                    let grow = &g[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut dxhat = vec![S::zero(); d];
                    for j in 0..d {
                        dxhat[j] = grow[j] * gdata[j];
                    }
                    let mean_dx = dxhat.iter().copied().fold(S::zero(), |a, v| a + v) / dn;
                    let mean_dxh = dxhat
                        .iter()
                        .zip(hrow)
                        .map(|(&a, &b)| a * b)
                        .fold(S::zero(), |a, v| a + v)
                        / dn;
                    for j in 0..d {
                        dst[r * d + j] += istds[r] * (dxhat[j] - mean_dx - hrow[j] * mean_dxh);
                    }
                }
            });
        }

        Op::NormalizeRows { x } => {
            let xdata = &nodes[x.0].data;
            let y = &nodes[i].data;
            acc(grads, nodes, *x, |dst| {
                for r in 0..rows {
                    let xrow = &xdata[r * cols..(r + 1) * cols];
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let norm = xrow
                        .iter()
                        .map(|&v| v * v)
                        .fold(S::zero(), |a, v| a + v)
                        .sqrt();
                    let gy = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&a, &b)| a * b)
                        .fold(S::zero(), |a, v| a + v);
                    for j in 0..cols {
                        dst[r * cols + j] += (grow[j] - yrow[j] * gy) / norm;
                    }
                }
            });
        }

        Op::MeanRows { x } => {
            let n = match nodes[x.0].shape.len() {
                1 => 1,
                _ => nodes[x.0].shape[0],
            };
            let nn = s::<S>(n as f64);
            acc(grads, nodes, *x, |dst| {
                for r in 0..n {
                    for j in 0..cols {
                        dst[r * cols + j] += g[j] / nn;
                    }
                }
            });
        }

        Op::MeanAll { x } => {
            let numel = nodes[x.0].data.len();
            let nn = s::<S>(numel as f64);
            acc(grads, nodes, *x, |dst| {
                for d in dst.iter_mut() {
                    *d += g[0] / nn;
                }
            });
        }

        Op::SumAll { x } => {
            acc(grads, nodes, *x, |dst| {
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            });
        }

        Op::ConcatRows { a, b } => {
            let na = match nodes[a.0].shape.len() {
                1 => 1,
                _ => nodes[a.0].shape[0],
            };
            acc(grads, nodes, *a, |dst| {
                for (d, v) in dst.iter_mut().zip(&g[..na * cols]) {
                    *d += *v;
                }
            });
            acc(grads, nodes, *b, |dst| {
                for (d, v) in dst.iter_mut().zip(&g[na * cols..]) {
                    *d += *v;
                }
            });
        }

        Op::SliceRows { x, start } => {
            let off = start * cols;
            acc(grads, nodes, *x, |dst| {
                for (k, v) in g.iter().enumerate() {
                    dst[off + k] += *v;
                }
            });
        }

        Op::GatherRows { table, ids } => {
            acc(grads, nodes, *table, |dst| {
                for (r, &row) in ids.iter().enumerate() {
                    for j in 0..cols {
                        dst[row * cols + j] += g[r * cols + j];
                    }
                }
            });
        }

        Op::PermuteGather { x, idx } => {
            acc(grads, nodes, *x, |dst| {
                for (k, &src_pos) in idx.iter().enumerate() {
                    dst[src_pos] += g[k];
                }
            });
        }

        Op::Reshape { x } => {
            acc(grads, nodes, *x, |dst| {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += *v;
                }
            });
        }

        Op::MulBy { x, s: f } => {
            let fv = nodes[f.0].data[0];
            let xdata = &nodes[x.0].data;
            acc(grads, nodes, *x, |dst| {
                for k in 0..g.len() {
                    dst[k] += g[k] * fv;
                }
            });
            acc(grads, nodes, *f, |dst| {
                let mut t = S::zero();
                for k in 0..g.len() {
                    t += g[k] * xdata[k];
                }
                dst[0] += t;
            });
        }

        Op::DivBy { x, s: f } => {
            let fv = nodes[f.0].data[0];
            let xdata = &nodes[x.0].data;
            acc(grads, nodes, *x, |dst| {
                for k in 0..g.len() {
                    dst[k] += g[k] / fv;
                }
            });
            acc(grads, nodes, *f, |dst| {
                let mut t = S::zero();
                for k in 0..g.len() {
                    t += g[k] * xdata[k];
                }
                dst[0] -= t / (fv * fv);
            });
        }

        Op::MaxConst { x, c } => {
            let xdata = &nodes[x.0].data;
            acc(grads, nodes, *x, |dst| {
                for k in 0..g.len() {
                    if xdata[k] > *c {
                        dst[k] += g[k];
                    }
                }
            });
        }

        Op::Clamp01 { x } => {
            let xdata = &nodes[x.0].data;
            acc(grads, nodes, *x, |dst| {
                for k in 0..g.len() {
                    if xdata[k] > S::zero() && xdata[k] < S::one() {
                        dst[k] += g[k];
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t2([2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&t2([2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t2([1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t2([2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t2([1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t2([3, 1], &[3.0, 4.0, 5.0]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_of_identity_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(&Tensor::scalar(3.5));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(&Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.squared_l2(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.sum_all(x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t2([1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t2([1, 2], &[1000.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.data(y);
        assert!(d[0] > 1.0 - 1e-9 && d[1] < 1e-9);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t2([1, 4], &[1.0, 1.0, 1.0, 1.0]));
        let g = tape.constant(&Tensor::full(vec![4], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for v in tape.data(y) {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_symmetric_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t2([1, 2], &[0.0, 2.0]));
        let g = tape.constant(&Tensor::full(vec![2], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.data(y);
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t2([2, 1], &[1.0, 2.0]));
        let g = tape.constant(&Tensor::full(vec![1], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![1]));
        assert!(tape.layer_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(&t2([3, 2], &[1.0, 0.0, 0.5, 0.5, -1.0, 2.0]));
        let k = tape.constant(&t2([1, 2], &[0.3, 0.7]));
        let v = tape.constant(&t2([1, 2], &[5.0, -6.0]));
        let o = tape.sdp_attention(q, k, v).unwrap();
        let d = tape.data(o);
        for r in 0..3 {
            assert!((d[r * 2] - 5.0).abs() < 1e-12);
            assert!((d[r * 2 + 1] + 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_of_self_is_one() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(&Tensor::from_vec(vec![3], vec![1.0, 2.0, -0.5]).unwrap());
        let c = tape.cosine_sim(v, v).unwrap();
        assert!((tape.value(c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(&Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap());
        let v = tape.constant(&Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap());
        let c = tape.cosine_sim(u, v).unwrap();
        assert!(tape.value(c).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_errors() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(&Tensor::zeros(vec![2]));
        let v = tape.constant(&Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap());
        assert!(matches!(tape.cosine_sim(u, v), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn exp_overflow_is_hard_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::from_vec(vec![1], vec![1.0e5f32]).unwrap());
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t2([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(&t2([1, 3], &[7.0, 8.0, 9.0]));
        let c = tape.concat_rows(a, b).unwrap();
        let a2 = tape.slice_rows(c, 0, 2).unwrap();
        let b2 = tape.slice_rows(c, 2, 3).unwrap();
        assert_eq!(tape.data(a2), tape.data(a));
        assert_eq!(tape.data(b2), tape.data(b));
    }
}
