//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends a node holding its forward value and the recipe
//! for its backward rule. Node ids grow monotonically, so the tape is already
//! topologically ordered and [`Graph::backward`] is a single reverse sweep.
//! Gradients are produced for tracked leaves only; intermediate gradients are
//! dropped as soon as their consumers have been processed.

use super::{NumericError, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    AddRowBroadcast { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulColVec { a: TensorId, v: TensorId },
    Scale { x: TensorId, c: f64 },
    AddConst { x: TensorId },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    GatherRows { x: TensorId, indices: Vec<usize> },
    GatherScalars { x: TensorId, indices: Vec<usize> },
    SegmentSumRows { x: TensorId, segments: Vec<usize> },
    TypedMatMul { x: TensorId, weights: Vec<TensorId>, types: Vec<usize> },
    RowDot { a: TensorId, b: TensorId },
    SoftmaxRows { x: TensorId },
    SegmentSoftmax { x: TensorId, segments: Vec<usize> },
    Sigmoid { x: TensorId },
    Gelu { x: TensorId },
    Dropout { x: TensorId, mask: Vec<f64> },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    CrossEntropyRows { logits: TensorId, targets: Vec<usize> },
    NllRows { probs: TensorId, targets: Vec<usize> },
    PadCols { x: TensorId },
    Reshape { x: TensorId },
    LayerNormRows { x: TensorId, gamma: TensorId, beta: TensorId },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients keyed by tape id, populated for tracked leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Probability floor inside log-likelihood losses, guarding against -inf.
pub(crate) const PROB_FLOOR: f64 = 1e-12;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A tracked leaf participates in backward; use for parameters.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> TensorId {
        self.push(value, Op::Leaf, tracked)
    }

    /// An untracked leaf: inputs, masks, and other constants.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> TensorId {
        self.nodes.push(Node { value, op, tracked });
        TensorId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].tracked
    }

    fn require_matrix(&self, op: &'static str, id: TensorId) -> Result<(usize, usize), NumericError> {
        let t = self.value(id);
        if t.rank() != 2 {
            return Err(NumericError::BadShape { op, expected: "a rank-2 tensor", shape: t.shape.clone() });
        }
        Ok((t.shape[0], t.shape[1]))
    }

    fn require_vector(&self, op: &'static str, id: TensorId) -> Result<usize, NumericError> {
        let t = self.value(id);
        if t.rank() != 1 {
            return Err(NumericError::BadShape { op, expected: "a rank-1 tensor", shape: t.shape.clone() });
        }
        Ok(t.shape[0])
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericError> {
        let (m, ka) = self.require_matrix("matmul", a)?;
        let (kb, n) = self.require_matrix("matmul", b)?;
        if ka != kb {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm_nn(m, ka, n, &self.value(a).data, &self.value(b).data, 0.0, &mut out.data);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul { a, b }, tracked))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, NumericError> {
        let (r, c) = self.require_matrix("transpose", x)?;
        let src = &self.value(x).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose { x }, tracked))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(NumericError::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o += v;
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add { a, b }, tracked))
    }

    /// `[n, d] + [d]`, adding the bias vector to every row.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, NumericError> {
        let (n, d) = self.require_matrix("add_row_broadcast", a)?;
        let bd = self.require_vector("add_row_broadcast", bias)?;
        if bd != d {
            return Err(NumericError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(bias).shape.clone(),
            });
        }
        let mut out = self.value(a).clone();
        let bv = self.value(bias).data.clone();
        for i in 0..n {
            for j in 0..d {
                out.data[i * d + j] += bv[j];
            }
        }
        let tracked = self.tracked(a) || self.tracked(bias);
        Ok(self.push(out, Op::AddRowBroadcast { a, bias }, tracked))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(NumericError::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= v;
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul { a, b }, tracked))
    }

    /// Scale row `i` of `a: [n, d]` by `v[i]`.
    pub fn mul_col_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId, NumericError> {
        let (n, d) = self.require_matrix("mul_col_vec", a)?;
        let vn = self.require_vector("mul_col_vec", v)?;
        if vn != n {
            return Err(NumericError::ShapeMismatch {
                op: "mul_col_vec",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(v).shape.clone(),
            });
        }
        let mut out = self.value(a).clone();
        let scalars = self.value(v).data.clone();
        for i in 0..n {
            for j in 0..d {
                out.data[i * d + j] *= scalars[i];
            }
        }
        let tracked = self.tracked(a) || self.tracked(v);
        Ok(self.push(out, Op::MulColVec { a, v }, tracked))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= c;
        }
        let tracked = self.tracked(x);
        self.push(out, Op::Scale { x, c }, tracked)
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v += c;
        }
        let tracked = self.tracked(x);
        self.push(out, Op::AddConst { x }, tracked)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericError> {
        let first = self.require_matrix("concat_cols", parts[0])?;
        let n = first.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.require_matrix("concat_cols", p)?;
            if r != n {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            total += c;
        }
        let mut out = Tensor::zeros(vec![n, total]);
        let mut offset = 0;
        for &p in parts {
            let c = self.value(p).shape[1];
            for i in 0..n {
                let src = self.value(p).row(i).to_vec();
                out.data[i * total + offset..i * total + offset + c].copy_from_slice(&src);
            }
            offset += c;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, tracked))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericError> {
        let first = self.require_matrix("concat_rows", parts[0])?;
        let d = first.1;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.require_matrix("concat_rows", p)?;
            if c != d {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            total += r;
        }
        let mut out = Tensor::zeros(vec![total, d]);
        let mut offset = 0;
        for &p in parts {
            let r = self.value(p).shape[0];
            out.data[offset * d..(offset + r) * d].copy_from_slice(&self.value(p).data);
            offset += r;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, tracked))
    }

    /// Select rows of `x: [n, d]` by index; repeats allowed. Doubles as the
    /// embedding lookup when `x` is an embedding table.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId, NumericError> {
        let (n, d) = self.require_matrix("gather_rows", x)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(NumericError::IndexOutOfRange { op: "gather_rows", index: bad, bound: n });
        }
        let mut out = Tensor::zeros(vec![indices.len(), d]);
        for (r, &ix) in indices.iter().enumerate() {
            let src = self.value(x).row(ix).to_vec();
            out.row_mut(r).copy_from_slice(&src);
        }
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::GatherRows { x, indices: indices.to_vec() }, tracked))
    }

    /// Select flat elements of `x` into a vector.
    pub fn gather_scalars(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId, NumericError> {
        let numel = self.value(x).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
            return Err(NumericError::IndexOutOfRange { op: "gather_scalars", index: bad, bound: numel });
        }
        let data: Vec<f64> = indices.iter().map(|&i| self.value(x).data[i]).collect();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::vector(data), Op::GatherScalars { x, indices: indices.to_vec() }, tracked))
    }

    /// Sum rows of `x: [e, d]` into `out_rows` buckets given per-row segment
    /// ids; rows of empty segments are zero.
    pub fn segment_sum_rows(
        &mut self,
        x: TensorId,
        segments: &[usize],
        out_rows: usize,
    ) -> Result<TensorId, NumericError> {
        let (e, d) = self.require_matrix("segment_sum_rows", x)?;
        if segments.len() != e {
            return Err(NumericError::BadShape {
                op: "segment_sum_rows",
                expected: "one segment id per row",
                shape: vec![segments.len()],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= out_rows) {
            return Err(NumericError::IndexOutOfRange { op: "segment_sum_rows", index: bad, bound: out_rows });
        }
        let mut out = Tensor::zeros(vec![out_rows, d]);
        for (i, &s) in segments.iter().enumerate() {
            let src = self.value(x).row(i).to_vec();
            for (o, v) in out.row_mut(s).iter_mut().zip(src) {
                *o += v;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::SegmentSumRows { x, segments: segments.to_vec() }, tracked))
    }

    /// Row-typed linear map: `out[i] = x[i] · weights[types[i]]`. Rows are
    /// grouped by type so each group runs as one GEMM.
    pub fn typed_matmul(
        &mut self,
        x: TensorId,
        weights: &[TensorId],
        types: &[usize],
    ) -> Result<TensorId, NumericError> {
        let (n, din) = self.require_matrix("typed_matmul", x)?;
        if weights.is_empty() {
            return Err(NumericError::BadShape {
                op: "typed_matmul",
                expected: "at least one weight",
                shape: vec![],
            });
        }
        let (w_in, dout) = self.require_matrix("typed_matmul", weights[0])?;
        for &w in weights {
            let (wi, wo) = self.require_matrix("typed_matmul", w)?;
            if wi != din || (wi, wo) != (w_in, dout) {
                return Err(NumericError::ShapeMismatch {
                    op: "typed_matmul",
                    lhs: vec![din, dout],
                    rhs: self.value(w).shape.clone(),
                });
            }
        }
        if types.len() != n {
            return Err(NumericError::BadShape {
                op: "typed_matmul",
                expected: "one type id per row",
                shape: vec![types.len()],
            });
        }
        if let Some(&bad) = types.iter().find(|&&t| t >= weights.len()) {
            return Err(NumericError::IndexOutOfRange { op: "typed_matmul", index: bad, bound: weights.len() });
        }
        let mut out = Tensor::zeros(vec![n, dout]);
        for t in 0..weights.len() {
            let rows: Vec<usize> = (0..n).filter(|&i| types[i] == t).collect();
            if rows.is_empty() {
                continue;
            }
            let mut xa = vec![0.0; rows.len() * din];
            for (k, &i) in rows.iter().enumerate() {
                xa[k * din..(k + 1) * din].copy_from_slice(self.value(x).row(i));
            }
            let mut buf = vec![0.0; rows.len() * dout];
            gemm_nn(rows.len(), din, dout, &xa, &self.value(weights[t]).data, 0.0, &mut buf);
            for (k, &i) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(&buf[k * dout..(k + 1) * dout]);
            }
        }
        let tracked = self.tracked(x) || weights.iter().any(|&w| self.tracked(w));
        Ok(self.push(
            out,
            Op::TypedMatMul { x, weights: weights.to_vec(), types: types.to_vec() },
            tracked,
        ))
    }

    /// Per-row dot product of two `[n, d]` matrices, yielding `[n]`.
    pub fn row_dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericError> {
        let (n, d) = self.require_matrix("row_dot", a)?;
        if self.value(a).shape != self.value(b).shape {
            return Err(NumericError::ShapeMismatch {
                op: "row_dot",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut data = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.value(a).data[i * d + j] * self.value(b).data[i * d + j];
            }
            data[i] = acc;
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::vector(data), Op::RowDot { a, b }, tracked))
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, NumericError> {
        let (n, d) = self.require_matrix("softmax_rows", x)?;
        if d == 0 {
            return Err(NumericError::EmptySoftmax);
        }
        let mut out = Tensor::zeros(vec![n, d]);
        for i in 0..n {
            let row = self.value(x).row(i).to_vec();
            softmax_into(&row, out.row_mut(i));
        }
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::SoftmaxRows { x }, tracked))
    }

    /// Softmax of a score vector within each segment: scores with the same
    /// segment id normalize together. Empty input yields empty output.
    pub fn segment_softmax(&mut self, x: TensorId, segments: &[usize]) -> Result<TensorId, NumericError> {
        let e = self.require_vector("segment_softmax", x)?;
        if segments.len() != e {
            return Err(NumericError::BadShape {
                op: "segment_softmax",
                expected: "one segment id per score",
                shape: vec![segments.len()],
            });
        }
        let scores = &self.value(x).data;
        let nseg = segments.iter().map(|&s| s + 1).max().unwrap_or(0);
        let mut max = vec![f64::NEG_INFINITY; nseg];
        for (i, &s) in segments.iter().enumerate() {
            max[s] = max[s].max(scores[i]);
        }
        let mut denom = vec![0.0; nseg];
        let mut out = vec![0.0; e];
        for (i, &s) in segments.iter().enumerate() {
            out[i] = (scores[i] - max[s]).exp();
            denom[s] += out[i];
        }
        for (i, &s) in segments.iter().enumerate() {
            out[i] /= denom[s];
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::vector(out),
            Op::SegmentSoftmax { x, segments: segments.to_vec() },
            tracked,
        ))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = stable_sigmoid(*v);
        }
        let tracked = self.tracked(x);
        self.push(out, Op::Sigmoid { x }, tracked)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = gelu_value(*v);
        }
        let tracked = self.tracked(x);
        self.push(out, Op::Gelu { x }, tracked)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` so expectations
    /// match eval mode. Identity (the same id is returned, no node recorded)
    /// when not training or when `p == 0`.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        train: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<TensorId, NumericError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericError::InvalidRate(p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Dropout { x, mask }, tracked))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.value(x).data.iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(total), Op::SumAll { x }, tracked)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).numel().max(1);
        let total: f64 = self.value(x).data.iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(total / n as f64), Op::MeanAll { x }, tracked)
    }

    /// Mean cross-entropy of rows of raw logits against class indices,
    /// computed via a numerically stable log-sum-exp.
    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId, NumericError> {
        let (n, v) = self.require_matrix("cross_entropy_rows", logits)?;
        if targets.len() != n {
            return Err(NumericError::BadShape {
                op: "cross_entropy_rows",
                expected: "one target per row",
                shape: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericError::IndexOutOfRange { op: "cross_entropy_rows", index: bad, bound: v });
        }
        if v == 0 {
            return Err(NumericError::EmptySoftmax);
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = self.value(logits).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropyRows { logits, targets: targets.to_vec() },
            tracked,
        ))
    }

    /// Mean negative log-likelihood of rows that are already probability
    /// distributions (e.g. a mixture of softmax and copy weights). A small
    /// floor keeps zero-probability targets from producing infinities.
    pub fn nll_rows(&mut self, probs: TensorId, targets: &[usize]) -> Result<TensorId, NumericError> {
        let (n, v) = self.require_matrix("nll_rows", probs)?;
        if targets.len() != n {
            return Err(NumericError::BadShape {
                op: "nll_rows",
                expected: "one target per row",
                shape: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericError::IndexOutOfRange { op: "nll_rows", index: bad, bound: v });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total -= (self.value(probs).data[i * v + t] + PROB_FLOOR).ln();
        }
        let tracked = self.tracked(probs);
        Ok(self.push(
            Tensor::scalar(total / n.max(1) as f64),
            Op::NllRows { probs, targets: targets.to_vec() },
            tracked,
        ))
    }

    /// Right-pad `x: [n, c]` with zero columns up to `new_cols`.
    pub fn pad_cols(&mut self, x: TensorId, new_cols: usize) -> Result<TensorId, NumericError> {
        let (n, c) = self.require_matrix("pad_cols", x)?;
        if new_cols < c {
            return Err(NumericError::BadShape {
                op: "pad_cols",
                expected: "a width at least the current one",
                shape: vec![n, new_cols],
            });
        }
        let mut out = Tensor::zeros(vec![n, new_cols]);
        for i in 0..n {
            out.data[i * new_cols..i * new_cols + c].copy_from_slice(self.value(x).row(i));
        }
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::PadCols { x }, tracked))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, NumericError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(NumericError::ShapeMismatch {
                op: "reshape",
                lhs: self.value(x).shape.clone(),
                rhs: shape,
            });
        }
        let out = Tensor { shape, data: self.value(x).data.clone() };
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Reshape { x }, tracked))
    }

    /// Row-wise layer normalization: each row is standardized to zero mean
    /// and (biased) unit variance, then rescaled by `gamma` and shifted by
    /// `beta`, both of shape `[d]`.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId, NumericError> {
        let (n, d) = self.require_matrix("layer_norm_rows", x)?;
        if d == 0 {
            return Err(NumericError::BadShape {
                op: "layer_norm_rows",
                expected: "rows of nonzero width",
                shape: vec![n, d],
            });
        }
        for scale in [gamma, beta] {
            if self.value(scale).shape != [d] {
                return Err(NumericError::ShapeMismatch {
                    op: "layer_norm_rows",
                    lhs: vec![n, d],
                    rhs: self.value(scale).shape.clone(),
                });
            }
        }
        let mut out = Tensor::zeros(vec![n, d]);
        for i in 0..n {
            let row = self.value(x).row(i);
            let (mean, inv) = row_norm_stats(row);
            for j in 0..d {
                out.data[i * d + j] = (row[j] - mean) * inv * self.value(gamma).data[j]
                    + self.value(beta).data[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(out, Op::LayerNormRows { x, gamma, beta }, tracked))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for tracked leaves;
    /// untracked tensors are left untouched.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, NumericError> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(NumericError::NonScalarLoss(loss_value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: loss_value.shape.clone(), data: vec![1.0] });

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let n = self.value(*b).shape[1];
                    if self.tracked(*a) {
                        let ga = ensure(&mut grads, a.0, &self.value(*a).shape);
                        gemm_nt(m, n, k, &g.data, &self.value(*b).data, &mut ga.data);
                    }
                    if self.tracked(*b) {
                        let gb = ensure(&mut grads, b.0, &self.value(*b).shape);
                        gemm_tn(k, m, n, &self.value(*a).data, &g.data, &mut gb.data);
                    }
                }
                Op::Transpose { x } => {
                    let (c, r) = (g.shape[0], g.shape[1]);
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for i in 0..c {
                        for j in 0..r {
                            gx.data[j * c + i] += g.data[i * r + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for input in [a, b] {
                        if self.tracked(*input) {
                            add_into(ensure(&mut grads, input.0, &self.value(*input).shape), &g.data);
                        }
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    if self.tracked(*a) {
                        add_into(ensure(&mut grads, a.0, &self.value(*a).shape), &g.data);
                    }
                    if self.tracked(*bias) {
                        let d = self.value(*bias).shape[0];
                        let gb = ensure(&mut grads, bias.0, &self.value(*bias).shape);
                        for (ix, v) in g.data.iter().enumerate() {
                            gb.data[ix % d] += v;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.tracked(*a) {
                        let bv = self.value(*b).data.clone();
                        let ga = ensure(&mut grads, a.0, &self.value(*a).shape);
                        for i in 0..g.data.len() {
                            ga.data[i] += g.data[i] * bv[i];
                        }
                    }
                    if self.tracked(*b) {
                        let av = self.value(*a).data.clone();
                        let gb = ensure(&mut grads, b.0, &self.value(*b).shape);
                        for i in 0..g.data.len() {
                            gb.data[i] += g.data[i] * av[i];
                        }
                    }
                }
                Op::MulColVec { a, v } => {
                    let (n, d) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    if self.tracked(*a) {
                        let sv = self.value(*v).data.clone();
                        let ga = ensure(&mut grads, a.0, &self.value(*a).shape);
                        for i in 0..n {
                            for j in 0..d {
                                ga.data[i * d + j] += g.data[i * d + j] * sv[i];
                            }
                        }
                    }
                    if self.tracked(*v) {
                        let av = self.value(*a).data.clone();
                        let gv = ensure(&mut grads, v.0, &self.value(*v).shape);
                        for i in 0..n {
                            let mut acc = 0.0;
                            for j in 0..d {
                                acc += g.data[i * d + j] * av[i * d + j];
                            }
                            gv.data[i] += acc;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for (o, v) in gx.data.iter_mut().zip(&g.data) {
                        *o += c * v;
                    }
                }
                Op::AddConst { x } => {
                    add_into(ensure(&mut grads, x.0, &self.value(*x).shape), &g.data);
                }
                Op::ConcatCols { parts } => {
                    let n = g.shape[0];
                    let total = g.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).shape[1];
                        if self.tracked(p) {
                            let gp = ensure(&mut grads, p.0, &self.value(p).shape);
                            for i in 0..n {
                                for j in 0..c {
                                    gp.data[i * c + j] += g.data[i * total + offset + j];
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows { parts } => {
                    let d = g.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).shape[0];
                        if self.tracked(p) {
                            let gp = ensure(&mut grads, p.0, &self.value(p).shape);
                            add_into(gp, &g.data[offset * d..(offset + r) * d]);
                        }
                        offset += r;
                    }
                }
                Op::GatherRows { x, indices } => {
                    let d = self.value(*x).shape[1];
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            gx.data[ix * d + j] += g.data[r * d + j];
                        }
                    }
                }
                Op::GatherScalars { x, indices } => {
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for (r, &ix) in indices.iter().enumerate() {
                        gx.data[ix] += g.data[r];
                    }
                }
                Op::SegmentSumRows { x, segments } => {
                    let d = self.value(*x).shape[1];
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for (i, &s) in segments.iter().enumerate() {
                        for j in 0..d {
                            gx.data[i * d + j] += g.data[s * d + j];
                        }
                    }
                }
                Op::TypedMatMul { x, weights, types } => {
                    let (n, din) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let dout = self.value(weights[0]).shape[1];
                    for t in 0..weights.len() {
                        let rows: Vec<usize> = (0..n).filter(|&i| types[i] == t).collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let mut gt = vec![0.0; rows.len() * dout];
                        let mut xt = vec![0.0; rows.len() * din];
                        for (k, &i) in rows.iter().enumerate() {
                            gt[k * dout..(k + 1) * dout].copy_from_slice(&g.data[i * dout..(i + 1) * dout]);
                            xt[k * din..(k + 1) * din].copy_from_slice(self.value(*x).row(i));
                        }
                        if self.tracked(weights[t]) {
                            let gw = ensure(&mut grads, weights[t].0, &self.value(weights[t]).shape);
                            gemm_tn(din, rows.len(), dout, &xt, &gt, &mut gw.data);
                        }
                        if self.tracked(*x) {
                            let mut gxt = vec![0.0; rows.len() * din];
                            gemm_nt(rows.len(), dout, din, &gt, &self.value(weights[t]).data, &mut gxt);
                            let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                            for (k, &i) in rows.iter().enumerate() {
                                for j in 0..din {
                                    gx.data[i * din + j] += gxt[k * din + j];
                                }
                            }
                        }
                    }
                }
                Op::RowDot { a, b } => {
                    let (n, d) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    if self.tracked(*a) {
                        let bv = self.value(*b).data.clone();
                        let ga = ensure(&mut grads, a.0, &self.value(*a).shape);
                        for i in 0..n {
                            for j in 0..d {
                                ga.data[i * d + j] += g.data[i] * bv[i * d + j];
                            }
                        }
                    }
                    if self.tracked(*b) {
                        let av = self.value(*a).data.clone();
                        let gb = ensure(&mut grads, b.0, &self.value(*b).shape);
                        for i in 0..n {
                            for j in 0..d {
                                gb.data[i * d + j] += g.data[i] * av[i * d + j];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let y = &self.nodes[id].value;
                    let (n, d) = (y.shape[0], y.shape[1]);
                    let mut delta = vec![0.0; n * d];
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += g.data[i * d + j] * y.data[i * d + j];
                        }
                        for j in 0..d {
                            delta[i * d + j] = y.data[i * d + j] * (g.data[i * d + j] - dot);
                        }
                    }
                    add_into(ensure(&mut grads, x.0, &self.value(*x).shape), &delta);
                }
                Op::SegmentSoftmax { x, segments } => {
                    let y = &self.nodes[id].value;
                    let nseg = segments.iter().map(|&s| s + 1).max().unwrap_or(0);
                    let mut dots = vec![0.0; nseg];
                    for (i, &s) in segments.iter().enumerate() {
                        dots[s] += g.data[i] * y.data[i];
                    }
                    let mut delta = vec![0.0; y.data.len()];
                    for (i, &s) in segments.iter().enumerate() {
                        delta[i] = y.data[i] * (g.data[i] - dots[s]);
                    }
                    add_into(ensure(&mut grads, x.0, &self.value(*x).shape), &delta);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[id].value.data.clone();
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for i in 0..y.len() {
                        gx.data[i] += g.data[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x).data.clone();
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for i in 0..xv.len() {
                        gx.data[i] += g.data[i] * gelu_grad(xv[i]);
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for i in 0..mask.len() {
                        gx.data[i] += g.data[i] * mask[i];
                    }
                }
                Op::SumAll { x } => {
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for v in &mut gx.data {
                        *v += g.data[0];
                    }
                }
                Op::MeanAll { x } => {
                    let n = self.value(*x).numel().max(1) as f64;
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for v in &mut gx.data {
                        *v += g.data[0] / n;
                    }
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let (n, v) = (self.value(*logits).shape[0], self.value(*logits).shape[1]);
                    let mut delta = vec![0.0; n * v];
                    for (i, &t) in targets.iter().enumerate() {
                        let row = self.value(*logits).row(i).to_vec();
                        softmax_into(&row, &mut delta[i * v..(i + 1) * v]);
                        delta[i * v + t] -= 1.0;
                    }
                    let scale = g.data[0] / n as f64;
                    for d in &mut delta {
                        *d *= scale;
                    }
                    add_into(ensure(&mut grads, logits.0, &self.value(*logits).shape), &delta);
                }
                Op::NllRows { probs, targets } => {
                    let (n, v) = (self.value(*probs).shape[0], self.value(*probs).shape[1]);
                    let pv = self.value(*probs).data.clone();
                    let gp = ensure(&mut grads, probs.0, &self.value(*probs).shape);
                    for (i, &t) in targets.iter().enumerate() {
                        gp.data[i * v + t] -= g.data[0] / (n as f64 * (pv[i * v + t] + PROB_FLOOR));
                    }
                }
                Op::PadCols { x } => {
                    let (n, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let total = g.shape[1];
                    let gx = ensure(&mut grads, x.0, &self.value(*x).shape);
                    for i in 0..n {
                        for j in 0..c {
                            gx.data[i * c + j] += g.data[i * total + j];
                        }
                    }
                }
                Op::Reshape { x } => {
                    add_into(ensure(&mut grads, x.0, &self.value(*x).shape), &g.data);
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let (n, d) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                    let gam = self.value(*gamma).data.clone();
                    let mut dx = vec![0.0; n * d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for i in 0..n {
                        let row = self.value(*x).row(i);
                        let (mean, inv) = row_norm_stats(row);
                        let mut mean_a = 0.0;
                        let mut mean_ax = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let a = g.data[i * d + j] * gam[j];
                            mean_a += a;
                            mean_ax += a * xhat;
                            dgamma[j] += g.data[i * d + j] * xhat;
                            dbeta[j] += g.data[i * d + j];
                        }
                        mean_a /= d as f64;
                        mean_ax /= d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let a = g.data[i * d + j] * gam[j];
                            dx[i * d + j] = inv * (a - mean_a - xhat * mean_ax);
                        }
                    }
                    if self.tracked(*x) {
                        add_into(ensure(&mut grads, x.0, &self.value(*x).shape), &dx);
                    }
                    if self.tracked(*gamma) {
                        add_into(ensure(&mut grads, gamma.0, &self.value(*gamma).shape), &dgamma);
                    }
                    if self.tracked(*beta) {
                        add_into(ensure(&mut grads, beta.0, &self.value(*beta).shape), &dbeta);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn ensure<'g>(grads: &'g mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'g mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

fn add_into(acc: &mut Tensor, delta: &[f64]) {
    for (o, v) in acc.data.iter_mut().zip(delta) {
        *o += v;
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

/// Mean and inverse standard deviation (with a small variance floor) of one
/// row, shared by the normalization forward and backward passes.
fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    const EPS: f64 = 1e-5;
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + EPS).sqrt())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_value(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ---- GEMM wrappers over the BLAS-like kernel ------------------------------

/// `C[m,n] += A[m,k] · B[k,n]` (row-major); `beta` scales the existing C.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C[m,n] += A[m,k] · Bᵀ` where B is stored as `[n,k]` (row-major).
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C[m,n] += Aᵀ · B[k,n]` where A is stored as `[k,m]` (row-major).
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
