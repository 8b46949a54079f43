//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records matrix operations eagerly during a forward pass.
//! [`Tape::backward`] then walks the recorded nodes in reverse and
//! accumulates the total derivative of a scalar loss into every
//! gradient-carrying leaf. Named parameters live outside the tape in a
//! [`ParamStore`]; [`Tape::param`] copies a parameter in as a leaf and
//! remembers the linkage so [`Tape::param_grads`] can hand the gradients
//! back in store order.
//!
//! Row layouts used by the attention ops:
//! - sequence layout: `(T*S) x d`, row `t*S + s` holds step `t` of
//!   sequence `s` ([`Tape::seq_attend`] / [`Tape::seq_mix`]);
//! - block layout: `(G*n) x d`, rows of one block are contiguous and
//!   attend within the block ([`Tape::block_attend`] / [`Tape::block_mix`]).

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::{
    accumulate_matmul_a_bt, accumulate_matmul_at_b, gelu_grad_scalar,
    gelu_scalar, Matrix,
};

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter matrices.
///
/// Registration order is the canonical manifest order used by
/// checkpoints and optimizer state.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|n| n.as_str()).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn census(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

enum Op {
    /// Leaf that never receives gradient (inputs, masks, targets).
    Const,
    /// Leaf that accumulates gradient (free variables and parameters).
    Var,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    Scale(TensorId, f64),
    AddConst(TensorId),
    AddRowVec(TensorId, TensorId),
    MulColVec(TensorId, TensorId),
    DivColVec(TensorId, TensorId),
    Gelu(TensorId),
    MaskedSoftmax(TensorId, Arc<Vec<bool>>),
    MaskedExp(TensorId, Arc<Vec<bool>>),
    RowSum(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// Per-row (mean, inv_std) saved at forward time.
        stats: Vec<(f64, f64)>,
    },
    Dropout(TensorId, Vec<f64>),
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    SliceCols(TensorId, usize),
    SumAll(TensorId),
    RowwiseDot(TensorId, TensorId),
    SeqAttend {
        q: TensorId,
        k: TensorId,
        seqs: usize,
    },
    SeqMix {
        a: TensorId,
        v: TensorId,
        seqs: usize,
    },
    BlockAttend {
        q: TensorId,
        k: TensorId,
        block: usize,
    },
    BlockMix {
        a: TensorId,
        v: TensorId,
        block: usize,
    },
    AddBlockBroadcast(TensorId, TensorId),
    LinearCombo(TensorId, Arc<Vec<Matrix>>),
    MaskedMae {
        pred: TensorId,
        target: Arc<Matrix>,
        mask: Arc<Vec<bool>>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Eager computation tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    param_leaves: HashMap<usize, TensorId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, t: TensorId) -> &Matrix {
        &self.nodes[t.0].value
    }

    /// Gradient of the last backward pass, if the node received any.
    pub fn grad(&self, t: TensorId) -> Option<&Matrix> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Matrix) -> TensorId {
        self.push(value, Op::Const)
    }

    /// Gradient-receiving leaf.
    pub fn var(&mut self, value: Matrix) -> TensorId {
        self.push(value, Op::Var)
    }

    /// Leaf backed by a stored parameter; one node per parameter per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(&t) = self.param_leaves.get(&id.0) {
            return t;
        }
        let t = self.push(store.get(id).clone(), Op::Var);
        self.param_leaves.insert(id.0, t);
        t
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul_elem: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut value = va.clone();
        for (o, &b_) in value.data_mut().iter_mut().zip(vb.data()) {
            *o *= b_;
        }
        Ok(self.push(value, Op::MulElem(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddConst(a))
    }

    /// Adds a `1 x n` row vector to every row of an `m x n` matrix.
    pub fn add_row_vec(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::Shape(format!(
                "add_row_vec: {:?} plus {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let mut value = vx.clone();
        let cols = value.cols();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            for (o, &bv) in row.iter_mut().zip(&vb.data()[..cols]) {
                *o += bv;
            }
        }
        Ok(self.push(value, Op::AddRowVec(x, b)))
    }

    /// Multiplies each row `i` of an `m x n` matrix by scalar `c[i]`.
    pub fn mul_col_vec(&mut self, x: TensorId, c: TensorId) -> Result<TensorId> {
        let (vx, vc) = (self.value(x), self.value(c));
        if vc.cols() != 1 || vc.rows() != vx.rows() {
            return Err(Error::Shape(format!(
                "mul_col_vec: {:?} times {:?}",
                vx.shape(),
                vc.shape()
            )));
        }
        let mut value = vx.clone();
        for i in 0..value.rows() {
            let f = vc.get(i, 0);
            for o in value.row_mut(i) {
                *o *= f;
            }
        }
        Ok(self.push(value, Op::MulColVec(x, c)))
    }

    /// Divides each row `i` of an `m x n` matrix by scalar `c[i]`.
    pub fn div_col_vec(&mut self, x: TensorId, c: TensorId) -> Result<TensorId> {
        let (vx, vc) = (self.value(x), self.value(c));
        if vc.cols() != 1 || vc.rows() != vx.rows() {
            return Err(Error::Shape(format!(
                "div_col_vec: {:?} over {:?}",
                vx.shape(),
                vc.shape()
            )));
        }
        let mut value = vx.clone();
        for i in 0..value.rows() {
            let f = 1.0 / vc.get(i, 0);
            for o in value.row_mut(i) {
                *o *= f;
            }
        }
        Ok(self.push(value, Op::DivColVec(x, c)))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu(x))
    }

    /// Row-wise softmax restricted to `allowed` entries; masked entries
    /// are exactly zero in the output. A fully masked row stays zero.
    pub fn masked_softmax(&mut self, x: TensorId, allowed: Arc<Vec<bool>>) -> Result<TensorId> {
        let vx = self.value(x);
        if allowed.len() != vx.len() {
            return Err(Error::Shape(format!(
                "masked_softmax: mask length {} vs matrix {:?}",
                allowed.len(),
                vx.shape()
            )));
        }
        let (rows, cols) = vx.shape();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let xs = vx.row(i);
            let ms = &allowed[i * cols..(i + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (v, &m) in xs.iter().zip(ms) {
                if m && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = value.row_mut(i);
            let mut sum = 0.0;
            for ((o, &v), &m) in out.iter_mut().zip(xs).zip(ms) {
                if m {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(value, Op::MaskedSoftmax(x, allowed)))
    }

    /// Elementwise `exp` on allowed entries, exact zero elsewhere.
    pub fn masked_exp(&mut self, x: TensorId, allowed: Arc<Vec<bool>>) -> Result<TensorId> {
        let vx = self.value(x);
        if allowed.len() != vx.len() {
            return Err(Error::Shape(format!(
                "masked_exp: mask length {} vs matrix {:?}",
                allowed.len(),
                vx.shape()
            )));
        }
        let mut value = vx.clone();
        for (o, &m) in value.data_mut().iter_mut().zip(allowed.iter()) {
            *o = if m { o.exp() } else { 0.0 };
        }
        Ok(self.push(value, Op::MaskedExp(x, allowed)))
    }

    pub fn row_sum(&mut self, x: TensorId) -> TensorId {
        let vx = self.value(x);
        let mut value = Matrix::zeros(vx.rows(), 1);
        for i in 0..vx.rows() {
            value.set(i, 0, vx.row(i).iter().sum());
        }
        self.push(value, Op::RowSum(x))
    }

    /// Row-wise layer normalization with affine gain and bias (`1 x n` each).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols();
        if vg.shape() != (1, n) || vb.shape() != (1, n) {
            return Err(Error::Shape(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let mut stats = Vec::with_capacity(vx.rows());
        let mut value = Matrix::zeros(vx.rows(), n);
        for i in 0..vx.rows() {
            let xs = vx.row(i);
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv_std));
            let out = value.row_mut(i);
            for j in 0..n {
                out[j] = (xs[j] - mean) * inv_std * vg.get(0, j) + vb.get(0, j);
            }
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Inverted dropout; samples a keep mask from `rng` at record time.
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut impl Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let scale = 1.0 / (1.0 - rate);
        let len = self.value(x).len();
        let keep: Vec<f64> = (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let mut value = self.value(x).clone();
        for (o, &k) in value.data_mut().iter_mut().zip(&keep) {
            *o *= k;
        }
        Ok(self.push(value, Op::Dropout(x, keep)))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({} vs {})",
                    rows,
                    self.value(p).rows()
                )));
            }
            cols += self.value(p).cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            let w = vp.cols();
            for i in 0..rows {
                value.row_mut(i)[offset..offset + w].copy_from_slice(vp.row(i));
            }
            offset += w;
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: no inputs".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column counts differ ({} vs {})",
                    cols,
                    self.value(p).cols()
                )));
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let vx = self.value(x);
        if start >= end || end > vx.cols() {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {end}) of {} columns",
                vx.cols()
            )));
        }
        let mut value = Matrix::zeros(vx.rows(), end - start);
        for i in 0..vx.rows() {
            value
                .row_mut(i)
                .copy_from_slice(&vx.row(i)[start..end]);
        }
        Ok(self.push(value, Op::SliceCols(x, start)))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().sum();
        let value = Matrix::from_vec(1, 1, vec![s]).expect("1x1");
        self.push(value, Op::SumAll(x))
    }

    /// Row-wise dot product of two `m x k` matrices, producing `m x 1`.
    pub fn rowwise_dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "rowwise_dot: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut value = Matrix::zeros(va.rows(), 1);
        for i in 0..va.rows() {
            let dot = va.row(i).iter().zip(vb.row(i)).map(|(x, y)| x * y).sum();
            value.set(i, 0, dot);
        }
        Ok(self.push(value, Op::RowwiseDot(a, b)))
    }

    /// Per-sequence attention scores. `q` is `(Tq*seqs) x dk`, `k` is
    /// `(Tk*seqs) x dk`, both in sequence layout; the output is
    /// `(Tq*seqs) x Tk` with `out[tq*seqs+s][tk] = q[tq*seqs+s] . k[tk*seqs+s]`.
    pub fn seq_attend(&mut self, q: TensorId, k: TensorId, seqs: usize) -> Result<TensorId> {
        let (vq, vk) = (self.value(q), self.value(k));
        if vq.cols() != vk.cols() || vq.rows() % seqs != 0 || vk.rows() % seqs != 0 {
            return Err(Error::Shape(format!(
                "seq_attend: q {:?}, k {:?}, seqs {}",
                vq.shape(),
                vk.shape(),
                seqs
            )));
        }
        let tq = vq.rows() / seqs;
        let tk = vk.rows() / seqs;
        let mut value = Matrix::zeros(tq * seqs, tk);
        for row in 0..tq * seqs {
            let s = row % seqs;
            let qs = vq.row(row);
            let out = value.row_mut(row);
            for (t, o) in out.iter_mut().enumerate().take(tk) {
                let ks = vk.row(t * seqs + s);
                *o = qs.iter().zip(ks).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(value, Op::SeqAttend { q, k, seqs }))
    }

    /// Per-sequence weighted sum of values. `a` is `(Tq*seqs) x Tk`,
    /// `v` is `(Tk*seqs) x dv`; output `(Tq*seqs) x dv`.
    pub fn seq_mix(&mut self, a: TensorId, v: TensorId, seqs: usize) -> Result<TensorId> {
        let (va, vv) = (self.value(a), self.value(v));
        if va.rows() % seqs != 0 || vv.rows() % seqs != 0 || vv.rows() / seqs != va.cols() {
            return Err(Error::Shape(format!(
                "seq_mix: a {:?}, v {:?}, seqs {}",
                va.shape(),
                vv.shape(),
                seqs
            )));
        }
        let tk = va.cols();
        let dv = vv.cols();
        let mut value = Matrix::zeros(va.rows(), dv);
        for row in 0..va.rows() {
            let s = row % seqs;
            let ws = va.row(row);
            let out = value.row_mut(row);
            for (t, &w) in ws.iter().enumerate().take(tk) {
                if w == 0.0 {
                    continue;
                }
                let vs = vv.row(t * seqs + s);
                for (o, &x) in out.iter_mut().zip(vs) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push(value, Op::SeqMix { a, v, seqs }))
    }

    /// Within-block attention scores. `q` and `k` are `(G*block) x dk`
    /// with contiguous blocks; output `(G*block) x block` where
    /// `out[g*block+i][j] = q[g*block+i] . k[g*block+j]`.
    pub fn block_attend(&mut self, q: TensorId, k: TensorId, block: usize) -> Result<TensorId> {
        let (vq, vk) = (self.value(q), self.value(k));
        if vq.shape() != vk.shape() || vq.rows() % block != 0 {
            return Err(Error::Shape(format!(
                "block_attend: q {:?}, k {:?}, block {}",
                vq.shape(),
                vk.shape(),
                block
            )));
        }
        let groups = vq.rows() / block;
        let mut value = Matrix::zeros(vq.rows(), block);
        for g in 0..groups {
            for i in 0..block {
                let qs = vq.row(g * block + i);
                let out = value.row_mut(g * block + i);
                for (j, o) in out.iter_mut().enumerate().take(block) {
                    let ks = vk.row(g * block + j);
                    *o = qs.iter().zip(ks).map(|(a, b)| a * b).sum();
                }
            }
        }
        Ok(self.push(value, Op::BlockAttend { q, k, block }))
    }

    /// Within-block weighted sum of values. `a` is `(G*block) x block`,
    /// `v` is `(G*block) x dv`; output `(G*block) x dv`.
    pub fn block_mix(&mut self, a: TensorId, v: TensorId, block: usize) -> Result<TensorId> {
        let (va, vv) = (self.value(a), self.value(v));
        if va.cols() != block || va.rows() != vv.rows() || va.rows() % block != 0 {
            return Err(Error::Shape(format!(
                "block_mix: a {:?}, v {:?}, block {}",
                va.shape(),
                vv.shape(),
                block
            )));
        }
        let groups = va.rows() / block;
        let dv = vv.cols();
        let mut value = Matrix::zeros(va.rows(), dv);
        for g in 0..groups {
            for i in 0..block {
                let ws = va.row(g * block + i);
                let out = value.row_mut(g * block + i);
                for (j, &w) in ws.iter().enumerate().take(block) {
                    if w == 0.0 {
                        continue;
                    }
                    let vs = vv.row(g * block + j);
                    for (o, &x) in out.iter_mut().zip(vs) {
                        *o += w * x;
                    }
                }
            }
        }
        Ok(self.push(value, Op::BlockMix { a, v, block }))
    }

    /// Adds an `n x n` matrix to every `n`-row block of `x`.
    pub fn add_block_broadcast(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vb.rows();
        if vb.cols() != vx.cols() || vx.cols() != n || vx.rows() % n != 0 {
            return Err(Error::Shape(format!(
                "add_block_broadcast: x {:?}, b {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let mut value = vx.clone();
        for g in 0..vx.rows() / n {
            for i in 0..n {
                let out = value.row_mut(g * n + i);
                for (o, &bv) in out.iter_mut().zip(vb.row(i)) {
                    *o += bv;
                }
            }
        }
        Ok(self.push(value, Op::AddBlockBroadcast(x, b)))
    }

    /// Weighted sum of fixed matrices: `sum_k coeffs[0][k] * mats[k]`.
    pub fn linear_combo(&mut self, coeffs: TensorId, mats: Arc<Vec<Matrix>>) -> Result<TensorId> {
        let vc = self.value(coeffs);
        if vc.rows() != 1 || vc.cols() != mats.len() || mats.is_empty() {
            return Err(Error::Shape(format!(
                "linear_combo: coeffs {:?} for {} matrices",
                vc.shape(),
                mats.len()
            )));
        }
        let shape = mats[0].shape();
        let mut value = Matrix::zeros(shape.0, shape.1);
        for (k, m) in mats.iter().enumerate() {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "linear_combo: matrix {} has shape {:?}, expected {:?}",
                    k,
                    m.shape(),
                    shape
                )));
            }
            let c = vc.get(0, k);
            for (o, &x) in value.data_mut().iter_mut().zip(m.data()) {
                *o += c * x;
            }
        }
        Ok(self.push(value, Op::LinearCombo(coeffs, mats)))
    }

    /// Mean absolute error over mask-true entries, as a `1 x 1` scalar.
    /// An all-masked input yields loss 0 with zero gradient.
    pub fn masked_mae(
        &mut self,
        pred: TensorId,
        target: Arc<Matrix>,
        mask: Arc<Vec<bool>>,
    ) -> Result<TensorId> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() || mask.len() != vp.len() {
            return Err(Error::Shape(format!(
                "masked_mae: pred {:?}, target {:?}, mask {}",
                vp.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((&p, &t), &m) in vp.data().iter().zip(target.data()).zip(mask.iter()) {
            if m {
                sum += (p - t).abs();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let value = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(value, Op::MaskedMae { pred, target, mask }))
    }

    fn accumulate(&mut self, t: TensorId, delta: &Matrix) {
        if matches!(self.nodes[t.0].op, Op::Const) {
            return;
        }
        let slot = &mut self.grads[t.0];
        match slot {
            Some(g) => {
                for (o, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *o += d;
                }
            }
            None => *slot = Some(delta.clone()),
        }
    }

    fn grad_or_zeros(&mut self, t: TensorId) -> &mut Matrix {
        let shape = self.nodes[t.0].value.shape();
        self.grads[t.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    /// Backpropagates from a `1 x 1` scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward: loss must be 1x1, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.step_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize, g: &Matrix) {
        // The node's op is logically read-only here; it is moved out and
        // restored so parents' grads can be mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Const);
        match &op {
            Op::Const | Op::Var => {}
            Op::MatMul(a, b) => {
                if !matches!(self.nodes[a.0].op, Op::Const) {
                    let vb = self.nodes[b.0].value.clone();
                    accumulate_matmul_a_bt(g, &vb, self.grad_or_zeros(*a), 1.0);
                }
                if !matches!(self.nodes[b.0].op, Op::Const) {
                    let va = self.nodes[a.0].value.clone();
                    accumulate_matmul_at_b(&va, g, self.grad_or_zeros(*b), 1.0);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                if !matches!(self.nodes[b.0].op, Op::Const) {
                    let neg = g.scale(-1.0);
                    self.accumulate(*b, &neg);
                }
            }
            Op::MulElem(a, b) => {
                if !matches!(self.nodes[a.0].op, Op::Const) {
                    let mut d = g.clone();
                    for (o, &x) in d.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *o *= x;
                    }
                    self.accumulate(*a, &d);
                }
                if !matches!(self.nodes[b.0].op, Op::Const) {
                    let mut d = g.clone();
                    for (o, &x) in d.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *o *= x;
                    }
                    self.accumulate(*b, &d);
                }
            }
            Op::Scale(a, c) => {
                let d = g.scale(*c);
                self.accumulate(*a, &d);
            }
            Op::AddConst(a) => self.accumulate(*a, g),
            Op::AddRowVec(x, b) => {
                self.accumulate(*x, g);
                if !matches!(self.nodes[b.0].op, Op::Const) {
                    let mut d = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &gv) in d.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    self.accumulate(*b, &d);
                }
            }
            Op::MulColVec(x, c) => {
                let vc = self.nodes[c.0].value.clone();
                if !matches!(self.nodes[x.0].op, Op::Const) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let f = vc.get(i, 0);
                        for o in d.row_mut(i) {
                            *o *= f;
                        }
                    }
                    self.accumulate(*x, &d);
                }
                if !matches!(self.nodes[c.0].op, Op::Const) {
                    let vx = &self.nodes[x.0].value;
                    let mut d = Matrix::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        let dot: f64 = g.row(i).iter().zip(vx.row(i)).map(|(a, b)| a * b).sum();
                        d.set(i, 0, dot);
                    }
                    self.accumulate(*c, &d);
                }
            }
            Op::DivColVec(x, c) => {
                let vc = self.nodes[c.0].value.clone();
                if !matches!(self.nodes[x.0].op, Op::Const) {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        let f = 1.0 / vc.get(i, 0);
                        for o in d.row_mut(i) {
                            *o *= f;
                        }
                    }
                    self.accumulate(*x, &d);
                }
                if !matches!(self.nodes[c.0].op, Op::Const) {
                    let vx = &self.nodes[x.0].value;
                    let mut d = Matrix::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        let ci = vc.get(i, 0);
                        let dot: f64 = g.row(i).iter().zip(vx.row(i)).map(|(a, b)| a * b).sum();
                        d.set(i, 0, -dot / (ci * ci));
                    }
                    self.accumulate(*c, &d);
                }
            }
            Op::Gelu(x) => {
                let mut d = g.clone();
                for (o, &v) in d.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                    *o *= gelu_grad_scalar(v);
                }
                self.accumulate(*x, &d);
            }
            Op::MaskedSoftmax(x, allowed) => {
                let y = &self.nodes[idx].value;
                let cols = y.cols();
                let mut d = Matrix::zeros(y.rows(), cols);
                for i in 0..y.rows() {
                    let ys = y.row(i);
                    let gs = g.row(i);
                    let ms = &allowed[i * cols..(i + 1) * cols];
                    let s: f64 = ys
                        .iter()
                        .zip(gs)
                        .zip(ms)
                        .filter(|(_, &m)| m)
                        .map(|((&y_, &g_), _)| y_ * g_)
                        .sum();
                    let out = d.row_mut(i);
                    for j in 0..cols {
                        if ms[j] {
                            out[j] = ys[j] * (gs[j] - s);
                        }
                    }
                }
                self.accumulate(*x, &d);
            }
            Op::MaskedExp(x, allowed) => {
                let y = &self.nodes[idx].value;
                let mut d = g.clone();
                for ((o, &yv), &m) in d.data_mut().iter_mut().zip(y.data()).zip(allowed.iter()) {
                    *o = if m { *o * yv } else { 0.0 };
                }
                self.accumulate(*x, &d);
            }
            Op::RowSum(x) => {
                let vx_shape = self.nodes[x.0].value.shape();
                let mut d = Matrix::zeros(vx_shape.0, vx_shape.1);
                for i in 0..vx_shape.0 {
                    let gv = g.get(i, 0);
                    for o in d.row_mut(i) {
                        *o = gv;
                    }
                }
                self.accumulate(*x, &d);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let vx = self.nodes[x.0].value.clone();
                let vg = self.nodes[gain.0].value.clone();
                let n = vx.cols();
                let nf = n as f64;

                if !matches!(self.nodes[bias.0].op, Op::Const) {
                    let mut db = Matrix::zeros(1, n);
                    for i in 0..g.rows() {
                        for (o, &gv) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    self.accumulate(*bias, &db);
                }
                if !matches!(self.nodes[gain.0].op, Op::Const) {
                    let mut dg = Matrix::zeros(1, n);
                    for i in 0..g.rows() {
                        let (mean, inv_std) = stats[i];
                        let xs = vx.row(i);
                        for j in 0..n {
                            dg.row_mut(0)[j] += g.get(i, j) * (xs[j] - mean) * inv_std;
                        }
                    }
                    self.accumulate(*gain, &dg);
                }
                if !matches!(self.nodes[x.0].op, Op::Const) {
                    let mut dx = Matrix::zeros(vx.rows(), n);
                    for i in 0..vx.rows() {
                        let (mean, inv_std) = stats[i];
                        let xs = vx.row(i);
                        let gs = g.row(i);
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..n {
                            let xh = (xs[j] - mean) * inv_std;
                            let dxh = gs[j] * vg.get(0, j);
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let out = dx.row_mut(i);
                        for j in 0..n {
                            let xh = (xs[j] - mean) * inv_std;
                            let dxh = gs[j] * vg.get(0, j);
                            out[j] = inv_std * (dxh - sum_dxh / nf - xh * sum_dxh_xh / nf);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Dropout(x, keep) => {
                let mut d = g.clone();
                for (o, &k) in d.data_mut().iter_mut().zip(keep) {
                    *o *= k;
                }
                self.accumulate(*x, &d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if !matches!(self.nodes[p.0].op, Op::Const) {
                        let mut d = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accumulate(p, &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p.0].value.rows();
                    if !matches!(self.nodes[p.0].op, Op::Const) {
                        let mut d = Matrix::zeros(r, g.cols());
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(g.row(offset + i));
                        }
                        self.accumulate(p, &d);
                    }
                    offset += r;
                }
            }
            Op::SliceCols(x, start) => {
                let shape = self.nodes[x.0].value.shape();
                let mut d = Matrix::zeros(shape.0, shape.1);
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(*x, &d);
            }
            Op::SumAll(x) => {
                let shape = self.nodes[x.0].value.shape();
                let d = Matrix::filled(shape.0, shape.1, g.get(0, 0));
                self.accumulate(*x, &d);
            }
            Op::RowwiseDot(a, b) => {
                if !matches!(self.nodes[a.0].op, Op::Const) {
                    let vb = &self.nodes[b.0].value;
                    let mut d = vb.clone();
                    for i in 0..d.rows() {
                        let f = g.get(i, 0);
                        for o in d.row_mut(i) {
                            *o *= f;
                        }
                    }
                    self.accumulate(*a, &d);
                }
                if !matches!(self.nodes[b.0].op, Op::Const) {
                    let va = &self.nodes[a.0].value;
                    let mut d = va.clone();
                    for i in 0..d.rows() {
                        let f = g.get(i, 0);
                        for o in d.row_mut(i) {
                            *o *= f;
                        }
                    }
                    self.accumulate(*b, &d);
                }
            }
            Op::SeqAttend { q, k, seqs } => {
                let seqs = *seqs;
                let vq = self.nodes[q.0].value.clone();
                let vk = self.nodes[k.0].value.clone();
                let tk = vk.rows() / seqs;
                if !matches!(self.nodes[q.0].op, Op::Const) {
                    let mut d = Matrix::zeros(vq.rows(), vq.cols());
                    for row in 0..vq.rows() {
                        let s = row % seqs;
                        let gs = g.row(row);
                        let out = d.row_mut(row);
                        for (t, &gv) in gs.iter().enumerate().take(tk) {
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, &kv) in out.iter_mut().zip(vk.row(t * seqs + s)) {
                                *o += gv * kv;
                            }
                        }
                    }
                    self.accumulate(*q, &d);
                }
                if !matches!(self.nodes[k.0].op, Op::Const) {
                    let mut d = Matrix::zeros(vk.rows(), vk.cols());
                    for row in 0..vq.rows() {
                        let s = row % seqs;
                        let gs = g.row(row);
                        let qs = vq.row(row);
                        for (t, &gv) in gs.iter().enumerate().take(tk) {
                            if gv == 0.0 {
                                continue;
                            }
                            let out = d.row_mut(t * seqs + s);
                            for (o, &qv) in out.iter_mut().zip(qs) {
                                *o += gv * qv;
                            }
                        }
                    }
                    self.accumulate(*k, &d);
                }
            }
            Op::SeqMix { a, v, seqs } => {
                let seqs = *seqs;
                let va = self.nodes[a.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                let tk = va.cols();
                if !matches!(self.nodes[a.0].op, Op::Const) {
                    let mut d = Matrix::zeros(va.rows(), tk);
                    for row in 0..va.rows() {
                        let s = row % seqs;
                        let gs = g.row(row);
                        let out = d.row_mut(row);
                        for (t, o) in out.iter_mut().enumerate().take(tk) {
                            let vs = vv.row(t * seqs + s);
                            *o = gs.iter().zip(vs).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(*a, &d);
                }
                if !matches!(self.nodes[v.0].op, Op::Const) {
                    let mut d = Matrix::zeros(vv.rows(), vv.cols());
                    for row in 0..va.rows() {
                        let s = row % seqs;
                        let ws = va.row(row);
                        let gs = g.row(row);
                        for (t, &w) in ws.iter().enumerate().take(tk) {
                            if w == 0.0 {
                                continue;
                            }
                            let out = d.row_mut(t * seqs + s);
                            for (o, &gv) in out.iter_mut().zip(gs) {
                                *o += w * gv;
                            }
                        }
                    }
                    self.accumulate(*v, &d);
                }
            }
            Op::BlockAttend { q, k, block } => {
                let block = *block;
                let vq = self.nodes[q.0].value.clone();
                let vk = self.nodes[k.0].value.clone();
                let groups = vq.rows() / block;
                if !matches!(self.nodes[q.0].op, Op::Const) {
                    let mut d = Matrix::zeros(vq.rows(), vq.cols());
                    for gi in 0..groups {
                        for i in 0..block {
                            let gs = g.row(gi * block + i);
                            let out = d.row_mut(gi * block + i);
                            for (j, &gv) in gs.iter().enumerate().take(block) {
                                if gv == 0.0 {
                                    continue;
                                }
                                for (o, &kv) in out.iter_mut().zip(vk.row(gi * block + j)) {
                                    *o += gv * kv;
                                }
                            }
                        }
                    }
                    self.accumulate(*q, &d);
                }
                if !matches!(self.nodes[k.0].op, Op::Const) {
                    let mut d = Matrix::zeros(vk.rows(), vk.cols());
                    for gi in 0..groups {
                        for i in 0..block {
                            let gs = g.row(gi * block + i);
                            let qs = vq.row(gi * block + i);
                            for (j, &gv) in gs.iter().enumerate().take(block) {
                                if gv == 0.0 {
                                    continue;
                                }
                                let out = d.row_mut(gi * block + j);
                                for (o, &qv) in out.iter_mut().zip(qs) {
                                    *o += gv * qv;
                                }
                            }
                        }
                    }
                    self.accumulate(*k, &d);
                }
            }
            Op::BlockMix { a, v, block } => {
                let block = *block;
                let va = self.nodes[a.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                let groups = va.rows() / block;
                if !matches!(self.nodes[a.0].op, Op::Const) {
                    let mut d = Matrix::zeros(va.rows(), block);
                    for gi in 0..groups {
                        for i in 0..block {
                            let gs = g.row(gi * block + i);
                            let out = d.row_mut(gi * block + i);
                            for (j, o) in out.iter_mut().enumerate().take(block) {
                                let vs = vv.row(gi * block + j);
                                *o = gs.iter().zip(vs).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    self.accumulate(*a, &d);
                }
                if !matches!(self.nodes[v.0].op, Op::Const) {
                    let mut d = Matrix::zeros(vv.rows(), vv.cols());
                    for gi in 0..groups {
                        for i in 0..block {
                            let ws = va.row(gi * block + i);
                            let gs = g.row(gi * block + i);
                            for (j, &w) in ws.iter().enumerate().take(block) {
                                if w == 0.0 {
                                    continue;
                                }
                                let out = d.row_mut(gi * block + j);
                                for (o, &gv) in out.iter_mut().zip(gs) {
                                    *o += w * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(*v, &d);
                }
            }
            Op::AddBlockBroadcast(x, b) => {
                self.accumulate(*x, g);
                if !matches!(self.nodes[b.0].op, Op::Const) {
                    let n = self.nodes[b.0].value.rows();
                    let mut d = Matrix::zeros(n, n);
                    for gi in 0..g.rows() / n {
                        for i in 0..n {
                            let gs = g.row(gi * n + i);
                            for (o, &gv) in d.row_mut(i).iter_mut().zip(gs) {
                                *o += gv;
                            }
                        }
                    }
                    self.accumulate(*b, &d);
                }
            }
            Op::LinearCombo(coeffs, mats) => {
                if !matches!(self.nodes[coeffs.0].op, Op::Const) {
                    let mut d = Matrix::zeros(1, mats.len());
                    for (k, m) in mats.iter().enumerate() {
                        let dot: f64 = g.data().iter().zip(m.data()).map(|(a, b)| a * b).sum();
                        d.set(0, k, dot);
                    }
                    self.accumulate(*coeffs, &d);
                }
            }
            Op::MaskedMae { pred, target, mask } => {
                let count = mask.iter().filter(|&&m| m).count();
                if count > 0 && !matches!(self.nodes[pred.0].op, Op::Const) {
                    let vp = &self.nodes[pred.0].value;
                    let gv = g.get(0, 0) / count as f64;
                    let mut d = Matrix::zeros(vp.rows(), vp.cols());
                    for ((o, (&p, &t)), &m) in d
                        .data_mut()
                        .iter_mut()
                        .zip(vp.data().iter().zip(target.data()))
                        .zip(mask.iter())
                    {
                        if m {
                            // Subgradient 0 at exact ties.
                            *o = gv * (p - t).signum() * if p == t { 0.0 } else { 1.0 };
                        }
                    }
                    self.accumulate(*pred, &d);
                }
            }
        }
        self.nodes[idx].op = op;
    }

    /// Gradients for every parameter of `store`, in store order. Unused
    /// parameters get zero matrices.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Matrix> {
        store
            .ids()
            .map(|id| match self.param_leaves.get(&id.0) {
                Some(t) => self
                    .grad(*t)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(store.get(id).rows(), store.get(id).cols())),
                None => Matrix::zeros(store.get(id).rows(), store.get(id).cols()),
            })
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Compares the analytic gradient of a scalar-valued tape function
/// against central finite differences, returning the maximum relative
/// error `|analytic - fd| / max(1, |analytic|)` over all entries of `x`.
pub fn gradient_check<F>(f: F, x: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));

    let eval = |m: Matrix| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.var(m);
        let l = f(&mut t, v)?;
        Ok(t.value(l).get(0, 0))
    };

    let mut max_err = 0.0f64;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(i, j, x.get(i, j) + eps);
            let mut minus = x.clone();
            minus.set(i, j, x.get(i, j) - eps);
            let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
            let a = analytic.get(i, j);
            let err = (a - fd).abs() / 1.0f64.max(a.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let err = gradient_check(|t, v| Ok(t.sum_all(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let x = Matrix::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.1]]).unwrap();
        let err = gradient_check(
            |t, v| {
                let sq = t.mul_elem(v, v)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn matmul_adam_of_gradients_matches_hand() {
        // loss = sum(x * w) with fixed w: d loss / dx = w row-broadcast.
        let mut tape = Tape::new();
        let x = tape.var(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = tape.constant(Matrix::from_rows(&[vec![3.0], vec![5.0]]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn masked_softmax_exact_zeros_and_normalization() {
        let mut tape = Tape::new();
        let x = tape.var(Matrix::from_rows(&[vec![5.0, 1.0, -2.0, 0.3]]).unwrap());
        let mask = Arc::new(vec![true, false, true, true]);
        let y = tape.masked_softmax(x, mask).unwrap();
        let v = tape.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        let sum: f64 = v.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn per_op_gradients_pass_finite_difference_check() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(3, 4, &mut rng);
            let w = random_matrix(4, 2, &mut rng);
            let mask: Arc<Vec<bool>> = Arc::new((0..12).map(|i| i % 5 != 0).collect());
            let gain = random_matrix(1, 4, &mut rng);
            let bias = random_matrix(1, 4, &mut rng);

            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, TensorId) -> Result<TensorId>>)> = vec![
                ("matmul", {
                    let w = w.clone();
                    Box::new(move |t, v| {
                        let wt = t.var(w.clone());
                        let y = t.matmul(v, wt)?;
                        Ok(t.sum_all(y))
                    })
                }),
                ("gelu", Box::new(|t, v| {
                    let y = t.gelu(v);
                    Ok(t.sum_all(y))
                })),
                ("masked_softmax", {
                    let mask = mask.clone();
                    Box::new(move |t, v| {
                        let y = t.masked_softmax(v, mask.clone())?;
                        let sq = t.mul_elem(y, y)?;
                        Ok(t.sum_all(sq))
                    })
                }),
                ("layer_norm", {
                    let (gain, bias) = (gain.clone(), bias.clone());
                    Box::new(move |t, v| {
                        let g = t.var(gain.clone());
                        let b = t.var(bias.clone());
                        let y = t.layer_norm(v, g, b, 1e-5)?;
                        let sq = t.mul_elem(y, y)?;
                        Ok(t.sum_all(sq))
                    })
                }),
                ("seq_attend_mix", Box::new(|t, v| {
                    // 3 steps of 1 sequence? rows=3 cols=4 -> seqs=1, T=3.
                    let a = t.seq_attend(v, v, 1)?;
                    let m = t.seq_mix(a, v, 1)?;
                    let sq = t.mul_elem(m, m)?;
                    Ok(t.sum_all(sq))
                })),
                ("block_attend_mix", Box::new(|t, v| {
                    // one block of 3 rows
                    let a = t.block_attend(v, v, 3)?;
                    let m = t.block_mix(a, v, 3)?;
                    let sq = t.mul_elem(m, m)?;
                    Ok(t.sum_all(sq))
                })),
                ("rowwise_dot", Box::new(|t, v| {
                    let y = t.rowwise_dot(v, v)?;
                    Ok(t.sum_all(y))
                })),
                ("div_col_vec", Box::new(|t, v| {
                    let c = t.var(Matrix::from_rows(&[vec![1.5], vec![2.0], vec![-3.0]]).unwrap());
                    let y = t.div_col_vec(v, c)?;
                    Ok(t.sum_all(y))
                })),
            ];

            for (name, f) in cases {
                let err = gradient_check(f.as_ref(), &x, 1e-5).unwrap();
                assert!(err < 1e-4, "op {name} seed {seed} err {err}");
            }
        }
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let mut tape = Tape::new();
        let a = tape.var(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.var(Matrix::from_rows(&[vec![3.0]]).unwrap());
        let cat = tape.concat_cols(&[a, b]).unwrap();
        let right = tape.slice_cols(cat, 2, 3).unwrap();
        let loss = tape.sum_all(right);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn masked_mae_matches_hand_and_handles_all_masked() {
        let mut tape = Tape::new();
        let p = tape.var(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let target = Arc::new(Matrix::from_rows(&[vec![1.0, 3.0, 5.0]]).unwrap());
        let loss = tape
            .masked_mae(p, target.clone(), Arc::new(vec![true, true, true]))
            .unwrap();
        assert!((tape.value(loss).get(0, 0) - 1.0).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        assert_eq!(g.data(), &[0.0, -1.0 / 3.0, -1.0 / 3.0]);

        let mut tape2 = Tape::new();
        let p2 = tape2.var(Matrix::from_rows(&[vec![9.0, 9.0, 9.0]]).unwrap());
        let loss2 = tape2
            .masked_mae(p2, target, Arc::new(vec![false, false, false]))
            .unwrap();
        assert_eq!(tape2.value(loss2).get(0, 0), 0.0);
        tape2.backward(loss2).unwrap();
        assert!(tape2.grad(p2).is_none() || tape2.grad(p2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_store_roundtrip_and_census() {
        let mut store = ParamStore::new();
        let a = store.register("w1", Matrix::zeros(2, 3));
        let b = store.register("w2", Matrix::zeros(4, 1));
        assert_eq!(store.census(), 10);
        assert_eq!(store.name(a), "w1");

        let mut tape = Tape::new();
        let ta = tape.param(&store, a);
        let ta2 = tape.param(&store, a);
        assert_eq!(ta, ta2, "one leaf per parameter");

        let s = tape.sum_all(ta);
        tape.backward(s).unwrap();
        let grads = tape.param_grads(&store);
        assert_eq!(grads.len(), 2);
        assert!(grads[0].data().iter().all(|&v| v == 1.0));
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
        let _ = b;
    }

    #[test]
    fn dropout_grad_routes_through_kept_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.var(Matrix::filled(10, 10, 2.0));
        let y = tape.dropout(x, 0.4, &mut rng).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let out = tape.value(y).clone();
        let g = tape.grad(x).unwrap();
        for (o, gv) in out.data().iter().zip(g.data()) {
            if *o == 0.0 {
                assert_eq!(*gv, 0.0);
            } else {
                assert!((gv - 1.0 / 0.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_combo_grad_is_per_matrix_dot() {
        let mats = Arc::new(vec![Matrix::identity(2), Matrix::filled(2, 2, 1.0)]);
        let mut tape = Tape::new();
        let c = tape.var(Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap());
        let y = tape.linear_combo(c, mats).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[2.0, 4.0]);
    }
}
