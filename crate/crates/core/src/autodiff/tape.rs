//! Wengert-list reverse-mode autodiff over rank ≤ 2 tensors.
//!
//! Every forward primitive appends an [`Op`] record to the tape and
//! materializes its output in a node arena. `backward` replays the list in
//! reverse, accumulating gradients per node. `replay_forward` recomputes all
//! non-leaf values from the current leaf values using the recorded attributes
//! (dropout masks, embedding ids, ...), which is what makes central-difference
//! checking possible on a recorded graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::math;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ── op records ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Op {
    MatMul { a: NodeId, b: NodeId, out: NodeId, m: usize, k: usize, n: usize },
    VecMat { x: NodeId, w: NodeId, out: NodeId, k: usize, n: usize },
    Transpose { x: NodeId, out: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    AddRowBroadcast { x: NodeId, bias: NodeId, out: NodeId, rows: usize, cols: usize },
    Scale { x: NodeId, out: NodeId, c: f64 },
    AffineCombine { x: NodeId, y: NodeId, out: NodeId, a: f64, b: f64 },
    Softmax { x: NodeId, out: NodeId, rows: usize, cols: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, out: NodeId, rows: usize, cols: usize, eps: f64 },
    Gelu { x: NodeId, out: NodeId },
    Sigmoid { x: NodeId, out: NodeId },
    Ln { x: NodeId, out: NodeId },
    Exp { x: NodeId, out: NodeId },
    MeanAxis { x: NodeId, out: NodeId, rows: usize, cols: usize, axis: usize },
    MaskedMeanRows { x: NodeId, out: NodeId, rows: usize, cols: usize, mask: Vec<u8> },
    ConcatCols { xs: Vec<NodeId>, out: NodeId, rows: usize, widths: Vec<usize> },
    SliceCols { x: NodeId, out: NodeId, rows: usize, cols: usize, lo: usize, hi: usize },
    Index { x: NodeId, out: NodeId, at: usize },
    Reshape { x: NodeId, out: NodeId },
    Embedding { table: NodeId, out: NodeId, ids: Vec<usize>, dim: usize },
    KeyMaskBias { x: NodeId, out: NodeId, rows: usize, cols: usize, mask: Vec<u8> },
    Dropout { x: NodeId, out: NodeId, mask: Vec<bool>, keep: f64 },
    Mix { x: NodeId, y: NodeId, lam: NodeId, out: NodeId },
    SumAll { x: NodeId, out: NodeId },
    MeanScalars { xs: Vec<NodeId>, out: NodeId },
    KlLoss { pred: NodeId, target: NodeId, out: NodeId },
    BceLoss { score: NodeId, out: NodeId, label: f64 },
}

/// Additive bias applied to masked key positions in attention scores.
pub const NEG_MASK: f64 = -1e9;

// ── tape ────────────────────────────────────────────────────────────────

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<T>>>,
    train_mode: bool,
    /// True once any train-mode dropout actually sampled a mask; such a
    /// graph is stochastic and refuses finite-difference replay by design.
    stochastic: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Tape<T> {
    pub fn new(train_mode: bool, dropout_seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            train_mode,
            stochastic: false,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn eval() -> Self {
        Tape::new(false, 0)
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── node access ─────────────────────────────────────────────────────

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Gradient of the last `backward` target w.r.t. `id`, zeros when the
    /// node never received any contribution.
    pub fn grad(&self, id: NodeId) -> Vec<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.nodes[id.0].data.len()],
        }
    }

    pub fn set_leaf_value(&mut self, id: NodeId, data: &[T]) -> Result<()> {
        if data.len() != self.nodes[id.0].data.len() {
            return Err(Error::shape("set_leaf_value", "length mismatch"));
        }
        self.nodes[id.0].data.copy_from_slice(data);
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, data, trainable });
        self.grads.push(None);
        id
    }

    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, trainable: bool) -> Result<NodeId> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("leaf", format!("{} values for shape {:?}", data.len(), shape)));
        }
        Ok(self.push(shape, data, trainable))
    }

    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<NodeId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar_leaf(&mut self, v: T) -> NodeId {
        self.push(vec![], vec![v], false)
    }

    fn rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected rank 2, got {:?}", s))),
        }
    }

    fn rank1(&self, op: &'static str, id: NodeId) -> Result<usize> {
        match self.nodes[id.0].shape[..] {
            [n] => Ok(n),
            ref s => Err(Error::shape(op, format!("expected rank 1, got {:?}", s))),
        }
    }

    fn want_scalar(&self, op: &'static str, id: NodeId) -> Result<()> {
        if self.nodes[id.0].data.len() == 1 {
            Ok(())
        } else {
            Err(Error::shape(op, format!("expected scalar, got {:?}", self.nodes[id.0].shape)))
        }
    }

    // ── forward primitives ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {} vs {}", k, k2)));
        }
        let data = math::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let out = self.push(vec![m, n], data, false);
        self.ops.push(Op::MatMul { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn vecmat(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let k = self.rank1("vecmat", x)?;
        let (k2, n) = self.rank2("vecmat", w)?;
        if k != k2 {
            return Err(Error::shape("vecmat", format!("inner dims {} vs {}", k, k2)));
        }
        let data = math::matmul(&self.nodes[x.0].data, &self.nodes[w.0].data, 1, k, n);
        let out = self.push(vec![n], data, false);
        self.ops.push(Op::VecMat { x, w, out, k, n });
        Ok(out)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("transpose", x)?;
        let data = math::transpose(&self.nodes[x.0].data, rows, cols);
        let out = self.push(vec![cols, rows], data, false);
        self.ops.push(Op::Transpose { x, out, rows, cols });
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    /// x [rows,cols] + bias [cols] broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rank2("add_row_broadcast", x)?;
        let bn = self.rank1("add_row_broadcast", bias)?;
        if bn != cols {
            return Err(Error::shape("add_row_broadcast", format!("bias {} vs cols {}", bn, cols)));
        }
        let mut data = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] += self.nodes[bias.0].data[j];
            }
        }
        let out = self.push(vec![rows, cols], data, false);
        self.ops.push(Op::AddRowBroadcast { x, bias, out, rows, cols });
        Ok(out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cc = T::from_f64(c);
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * cc).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Scale { x, out, c });
        out
    }

    /// a·x + b·y with scalar constants a, b.
    pub fn affine_combine(&mut self, a: f64, x: NodeId, b: f64, y: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].shape != self.nodes[y.0].shape {
            return Err(Error::shape(
                "affine_combine",
                format!("{:?} vs {:?}", self.nodes[x.0].shape, self.nodes[y.0].shape),
            ));
        }
        let (ca, cb) = (T::from_f64(a), T::from_f64(b));
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .zip(&self.nodes[y.0].data)
            .map(|(&u, &v)| ca * u + cb * v)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::AffineCombine { x, y, out, a, b });
        Ok(out)
    }

    /// Row-wise softmax; rank-1 input is treated as a single row.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols, shape) = match self.nodes[x.0].shape[..] {
            [n] => (1, n, vec![n]),
            [r, c] => (r, c, vec![r, c]),
            ref s => return Err(Error::shape("softmax", format!("rank {:?}", s))),
        };
        let data = math::softmax_rows(&self.nodes[x.0].data, rows, cols);
        let out = self.push(shape, data, false);
        self.ops.push(Op::Softmax { x, out, rows, cols });
        Ok(out)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, cols) = self.rank2("layer_norm", x)?;
        if self.rank1("layer_norm", gamma)? != cols || self.rank1("layer_norm", beta)? != cols {
            return Err(Error::shape("layer_norm", "gamma/beta width mismatch"));
        }
        let data = math::layer_norm_rows(
            &self.nodes[x.0].data,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            rows,
            cols,
            eps,
        );
        let out = self.push(vec![rows, cols], data, false);
        self.ops.push(Op::LayerNorm { x, gamma, beta, out, rows, cols, eps });
        Ok(out)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| math::gelu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Gelu { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| math::sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Ln { x, out });
        out
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Exp { x, out });
        out
    }

    /// Mean over rows (`axis == 0`, yields [cols]) or cols (`axis == 1`).
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (rows, cols) = self.rank2("mean_axis", x)?;
        if axis > 1 {
            return Err(Error::shape("mean_axis", format!("axis {}", axis)));
        }
        let data = mean_axis_forward(&self.nodes[x.0].data, rows, cols, axis);
        let shape = if axis == 0 { vec![cols] } else { vec![rows] };
        let out = self.push(shape, data, false);
        self.ops.push(Op::MeanAxis { x, out, rows, cols, axis });
        Ok(out)
    }

    /// Mean of the unmasked rows of x [rows,cols]; mask holds 1 for live
    /// rows. Errors out when every row is masked.
    pub fn masked_mean_rows(&mut self, x: NodeId, mask: &[u8]) -> Result<NodeId> {
        let (rows, cols) = self.rank2("masked_mean_rows", x)?;
        if mask.len() != rows {
            return Err(Error::shape("masked_mean_rows", format!("mask {} vs rows {}", mask.len(), rows)));
        }
        let live = mask.iter().filter(|&&m| m != 0).count();
        if live == 0 {
            return Err(Error::shape("masked_mean_rows", "all rows masked"));
        }
        let data = masked_mean_forward(&self.nodes[x.0].data, rows, cols, mask, live);
        let out = self.push(vec![cols], data, false);
        self.ops.push(Op::MaskedMeanRows { x, out, rows, cols, mask: mask.to_vec() });
        Ok(out)
    }

    /// Concatenate rank-1 or rank-2 nodes along the last axis.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rank1 = self.nodes[xs[0].0].shape.len() == 1;
        let rows = if rank1 { 1 } else { self.rank2("concat_cols", xs[0])?.0 };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            if rank1 {
                widths.push(self.rank1("concat_cols", x)?);
            } else {
                let (r, c) = self.rank2("concat_cols", x)?;
                if r != rows {
                    return Err(Error::shape("concat_cols", format!("rows {} vs {}", r, rows)));
                }
                widths.push(c);
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (xi, &x) in xs.iter().enumerate() {
            let w = widths[xi];
            for r in 0..rows {
                let src = &self.nodes[x.0].data[r * w..(r + 1) * w];
                data[r * total + off..r * total + off + w].copy_from_slice(src);
            }
            off += w;
        }
        let shape = if rank1 { vec![total] } else { vec![rows, total] };
        let out = self.push(shape, data, false);
        self.ops.push(Op::ConcatCols { xs: xs.to_vec(), out, rows, widths });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (rows, cols) = self.rank2("slice_cols", x)?;
        if lo >= hi || hi > cols {
            return Err(Error::shape("slice_cols", format!("[{},{}) of {} cols", lo, hi, cols)));
        }
        let w = hi - lo;
        let mut data = vec![T::zero(); rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&self.nodes[x.0].data[r * cols + lo..r * cols + hi]);
        }
        let out = self.push(vec![rows, w], data, false);
        self.ops.push(Op::SliceCols { x, out, rows, cols, lo, hi });
        Ok(out)
    }

    /// Extract element `at` of a rank-1 node as a scalar.
    pub fn index(&mut self, x: NodeId, at: usize) -> Result<NodeId> {
        let n = self.rank1("index", x)?;
        if at >= n {
            return Err(Error::shape("index", format!("{} of len {}", at, n)));
        }
        let v = self.nodes[x.0].data[at];
        let out = self.push(vec![], vec![v], false);
        self.ops.push(Op::Index { x, out, at });
        Ok(out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[x.0].shape, shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    /// Gather rows of `table` [V,dim] at `ids`, yielding [len(ids),dim].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, dim) = self.rank2("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        let mut data = vec![T::zero(); ids.len() * dim];
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::shape("embedding", format!("id {} out of {}", id, v)));
            }
            data[r * dim..(r + 1) * dim].copy_from_slice(&self.nodes[table.0].data[id * dim..(id + 1) * dim]);
        }
        let out = self.push(vec![ids.len(), dim], data, false);
        self.ops.push(Op::Embedding { table, out, ids: ids.to_vec(), dim });
        Ok(out)
    }

    /// Add `NEG_MASK` to every column j of x [rows,cols] whose key is
    /// padding (mask[j] == 0). Identity in the backward pass.
    pub fn key_mask_bias(&mut self, x: NodeId, mask: &[u8]) -> Result<NodeId> {
        let (rows, cols) = self.rank2("key_mask_bias", x)?;
        if mask.len() != cols {
            return Err(Error::shape("key_mask_bias", format!("mask {} vs cols {}", mask.len(), cols)));
        }
        let neg = T::from_f64(NEG_MASK);
        let mut data = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for j in 0..cols {
                if mask[j] == 0 {
                    data[r * cols + j] += neg;
                }
            }
        }
        let out = self.push(vec![rows, cols], data, false);
        self.ops.push(Op::KeyMaskBias { x, out, rows, cols, mask: mask.to_vec() });
        Ok(out)
    }

    /// Inverted dropout: in train mode keeps each element with probability
    /// 1−p and rescales by 1/(1−p); identity (no op recorded) otherwise.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", p)));
        }
        if !self.train_mode || p == 0.0 {
            return Ok(x);
        }
        self.stochastic = true;
        let keep = 1.0 - p;
        let n = self.nodes[x.0].data.len();
        let mask: Vec<bool> = (0..n).map(|_| self.rng.random::<f64>() >= p).collect();
        let inv = T::from_f64(1.0 / keep);
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * inv } else { T::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Dropout { x, out, mask, keep });
        Ok(out)
    }

    /// λ·x + (1−λ)·y where λ is a scalar node on the tape, so gradients
    /// flow into x, y and λ itself.
    pub fn mix(&mut self, x: NodeId, y: NodeId, lam: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].shape != self.nodes[y.0].shape {
            return Err(Error::shape(
                "mix",
                format!("{:?} vs {:?}", self.nodes[x.0].shape, self.nodes[y.0].shape),
            ));
        }
        self.want_scalar("mix", lam)?;
        let l = self.nodes[lam.0].data[0];
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .zip(&self.nodes[y.0].data)
            .map(|(&u, &v)| l * u + (T::one() - l) * v)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(shape, data, false);
        self.ops.push(Op::Mix { x, y, lam, out });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        let out = self.push(vec![], vec![s], false);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    pub fn mean_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::shape("mean_scalars", "no inputs"));
        }
        let mut s = T::zero();
        for &x in xs {
            self.want_scalar("mean_scalars", x)?;
            s += self.nodes[x.0].data[0];
        }
        let v = s / T::from_f64(xs.len() as f64);
        let out = self.push(vec![], vec![v], false);
        self.ops.push(Op::MeanScalars { xs: xs.to_vec(), out });
        Ok(out)
    }

    /// KL(target ‖ pred) = Σ_j t_j (ln t_j − ln p_j) over two distributions
    /// of equal length, with both probabilities clamped away from zero.
    /// Gradients flow into the prediction and the target.
    pub fn kl_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let n = self.rank1("kl_loss", pred)?;
        if self.rank1("kl_loss", target)? != n {
            return Err(Error::shape("kl_loss", "length mismatch"));
        }
        check_distribution("kl_loss pred", &self.nodes[pred.0].data)?;
        check_distribution("kl_loss target", &self.nodes[target.0].data)?;
        let v = kl_forward(&self.nodes[pred.0].data, &self.nodes[target.0].data);
        let out = self.push(vec![], vec![v], false);
        self.ops.push(Op::KlLoss { pred, target, out });
        Ok(out)
    }

    /// Binary cross-entropy of a sigmoid score in (0,1) against a fixed
    /// 0/1 label, with the score clamped away from {0,1}.
    pub fn bce_loss(&mut self, score: NodeId, label: f64) -> Result<NodeId> {
        self.want_scalar("bce_loss", score)?;
        let v = bce_forward(self.nodes[score.0].data[0], T::from_f64(label));
        let out = self.push(vec![], vec![v], false);
        self.ops.push(Op::BceLoss { score, out, label });
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────────

    fn acc(&mut self, id: NodeId, delta: &[T]) {
        let g = self.grads[id.0].get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn acc_at(&mut self, id: NodeId, offset: usize, delta: &[T]) {
        let len = self.nodes[id.0].data.len();
        let g = self.grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
        for (gi, &d) in g[offset..offset + delta.len()].iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn taken(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads[id.0].clone()
    }

    /// Reverse sweep from a scalar loss. Existing gradients are cleared
    /// first, so each call yields the gradient of exactly one loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.want_scalar("backward", loss)?;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for oi in (0..self.ops.len()).rev() {
            let op = self.ops[oi].clone();
            self.step_backward(&op);
        }
        Ok(())
    }

    fn step_backward(&mut self, op: &Op) {
        match *op {
            Op::MatMul { a, b, out, m, k, n } => {
                let Some(dout) = self.taken(out) else { return };
                let bt = math::transpose(&self.nodes[b.0].data, k, n);
                let da = math::matmul(&dout, &bt, m, n, k);
                self.acc(a, &da);
                let at = math::transpose(&self.nodes[a.0].data, m, k);
                let db = math::matmul(&at, &dout, k, m, n);
                self.acc(b, &db);
            }
            Op::VecMat { x, w, out, k, n } => {
                let Some(dout) = self.taken(out) else { return };
                let wt = math::transpose(&self.nodes[w.0].data, k, n);
                let dx = math::matmul(&dout, &wt, 1, n, k);
                self.acc(x, &dx);
                let xv = self.nodes[x.0].data.clone();
                let dw = math::matmul(&xv, &dout, k, 1, n);
                self.acc(w, &dw);
            }
            Op::Transpose { x, out, rows, cols } => {
                let Some(dout) = self.taken(out) else { return };
                let dx = math::transpose(&dout, cols, rows);
                self.acc(x, &dx);
            }
            Op::Add { a, b, out } => {
                let Some(dout) = self.taken(out) else { return };
                self.acc(a, &dout);
                self.acc(b, &dout);
            }
            Op::Mul { a, b, out } => {
                let Some(dout) = self.taken(out) else { return };
                let da: Vec<T> = dout.iter().zip(&self.nodes[b.0].data).map(|(&d, &v)| d * v).collect();
                let db: Vec<T> = dout.iter().zip(&self.nodes[a.0].data).map(|(&d, &v)| d * v).collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::AddRowBroadcast { x, bias, out, rows, cols } => {
                let Some(dout) = self.taken(out) else { return };
                self.acc(x, &dout);
                let mut db = vec![T::zero(); cols];
                for r in 0..rows {
                    for j in 0..cols {
                        db[j] += dout[r * cols + j];
                    }
                }
                self.acc(bias, &db);
            }
            Op::Scale { x, out, c } => {
                let Some(dout) = self.taken(out) else { return };
                let cc = T::from_f64(c);
                let dx: Vec<T> = dout.iter().map(|&d| d * cc).collect();
                self.acc(x, &dx);
            }
            Op::AffineCombine { x, y, out, a, b } => {
                let Some(dout) = self.taken(out) else { return };
                let (ca, cb) = (T::from_f64(a), T::from_f64(b));
                let dx: Vec<T> = dout.iter().map(|&d| d * ca).collect();
                let dy: Vec<T> = dout.iter().map(|&d| d * cb).collect();
                self.acc(x, &dx);
                self.acc(y, &dy);
            }
            Op::Softmax { x, out, rows, cols } => {
                let Some(dout) = self.taken(out) else { return };
                let dx = math::softmax_rows_backward(&self.nodes[out.0].data, &dout, rows, cols);
                self.acc(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, out, rows, cols, eps } => {
                let Some(dout) = self.taken(out) else { return };
                let (dx, dg, db) = math::layer_norm_rows_backward(
                    &self.nodes[x.0].data,
                    &self.nodes[gamma.0].data,
                    &dout,
                    rows,
                    cols,
                    eps,
                );
                self.acc(x, &dx);
                self.acc(gamma, &dg);
                self.acc(beta, &db);
            }
            Op::Gelu { x, out } => {
                let Some(dout) = self.taken(out) else { return };
                let dx: Vec<T> = dout
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&d, &v)| d * math::gelu_grad(v))
                    .collect();
                self.acc(x, &dx);
            }
            Op::Sigmoid { x, out } => {
                let Some(dout) = self.taken(out) else { return };
                let dx: Vec<T> = dout
                    .iter()
                    .zip(&self.nodes[out.0].data)
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                self.acc(x, &dx);
            }
            Op::Ln { x, out } => {
                let Some(dout) = self.taken(out) else { return };
                let dx: Vec<T> = dout
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(&d, &v)| d / v)
                    .collect();
                self.acc(x, &dx);
            }
            Op::Exp { x, out } => {
                let Some(dout) = self.taken(out) else { return };
                let dx: Vec<T> = dout
                    .iter()
                    .zip(&self.nodes[out.0].data)
                    .map(|(&d, &e)| d * e)
                    .collect();
                self.acc(x, &dx);
            }
            Op::MeanAxis { x, out, rows, cols, axis } => {
                let Some(dout) = self.taken(out) else { return };
                let mut dx = vec![T::zero(); rows * cols];
                if axis == 0 {
                    let inv = T::from_f64(1.0 / rows as f64);
                    for r in 0..rows {
                        for j in 0..cols {
                            dx[r * cols + j] = dout[j] * inv;
                        }
                    }
                } else {
                    let inv = T::from_f64(1.0 / cols as f64);
                    for r in 0..rows {
                        for j in 0..cols {
                            dx[r * cols + j] = dout[r] * inv;
                        }
                    }
                }
                self.acc(x, &dx);
            }
            Op::MaskedMeanRows { x, out, rows, cols, ref mask } => {
                let Some(dout) = self.taken(out) else { return };
                let live = mask.iter().filter(|&&m| m != 0).count();
                let inv = T::from_f64(1.0 / live as f64);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    if mask[r] == 0 {
                        continue;
                    }
                    for j in 0..cols {
                        dx[r * cols + j] = dout[j] * inv;
                    }
                }
                self.acc(x, &dx);
            }
            Op::ConcatCols { ref xs, out, rows, ref widths } => {
                let Some(dout) = self.taken(out) else { return };
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (xi, &x) in xs.iter().enumerate() {
                    let w = widths[xi];
                    let mut dx = vec![T::zero(); rows * w];
                    for r in 0..rows {
                        dx[r * w..(r + 1) * w].copy_from_slice(&dout[r * total + off..r * total + off + w]);
                    }
                    self.acc(x, &dx);
                    off += w;
                }
            }
            Op::SliceCols { x, out, rows, cols, lo, hi } => {
                let Some(dout) = self.taken(out) else { return };
                let w = hi - lo;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + lo..r * cols + hi].copy_from_slice(&dout[r * w..(r + 1) * w]);
                }
                self.acc(x, &dx);
            }
            Op::Index { x, out, at } => {
                let Some(dout) = self.taken(out) else { return };
                let mut dx = vec![T::zero(); self.nodes[x.0].data.len()];
                dx[at] = dout[0];
                self.acc(x, &dx);
            }
            Op::Reshape { x, out } => {
                let Some(dout) = self.taken(out) else { return };
                self.acc(x, &dout);
            }
            Op::Embedding { table, out, ref ids, dim } => {
                let Some(dout) = self.taken(out) else { return };
                for (r, &id) in ids.iter().enumerate() {
                    self.acc_at(table, id * dim, &dout[r * dim..(r + 1) * dim]);
                }
            }
            Op::KeyMaskBias { x, out, .. } => {
                let Some(dout) = self.taken(out) else { return };
                self.acc(x, &dout);
            }
            Op::Dropout { x, out, ref mask, keep } => {
                let Some(dout) = self.taken(out) else { return };
                let inv = T::from_f64(1.0 / keep);
                let dx: Vec<T> = dout
                    .iter()
                    .zip(mask)
                    .map(|(&d, &m)| if m { d * inv } else { T::zero() })
                    .collect();
                self.acc(x, &dx);
            }
            Op::Mix { x, y, lam, out } => {
                let Some(dout) = self.taken(out) else { return };
                let l = self.nodes[lam.0].data[0];
                let dx: Vec<T> = dout.iter().map(|&d| d * l).collect();
                let dy: Vec<T> = dout.iter().map(|&d| d * (T::one() - l)).collect();
                let mut dl = T::zero();
                for ((&d, &u), &v) in dout.iter().zip(&self.nodes[x.0].data).zip(&self.nodes[y.0].data) {
                    dl += d * (u - v);
                }
                self.acc(x, &dx);
                self.acc(y, &dy);
                self.acc(lam, &[dl]);
            }
            Op::SumAll { x, out } => {
                let Some(dout) = self.taken(out) else { return };
                let dx = vec![dout[0]; self.nodes[x.0].data.len()];
                self.acc(x, &dx);
            }
            Op::MeanScalars { ref xs, out } => {
                let Some(dout) = self.taken(out) else { return };
                let d = dout[0] / T::from_f64(xs.len() as f64);
                for &x in xs {
                    self.acc(x, &[d]);
                }
            }
            Op::KlLoss { pred, target, out } => {
                let Some(dout) = self.taken(out) else { return };
                let d = dout[0];
                let clamp = T::LOG_CLAMP;
                let n = self.nodes[pred.0].data.len();
                let mut dp = vec![T::zero(); n];
                let mut dt = vec![T::zero(); n];
                for j in 0..n {
                    let p = self.nodes[pred.0].data[j].max(clamp);
                    let t = self.nodes[target.0].data[j];
                    // d/dp [t(ln t − ln p)] = −t/p; gradient is zero inside
                    // the clamped region.
                    if self.nodes[pred.0].data[j] > clamp {
                        dp[j] = -d * t / p;
                    }
                    // d/dt [t(ln t − ln p)] = ln t − ln p + 1, with t clamped
                    // the same way.
                    if t > clamp {
                        dt[j] = d * (t.ln() - p.ln() + T::one());
                    }
                }
                self.acc(pred, &dp);
                self.acc(target, &dt);
            }
            Op::BceLoss { score, out, label } => {
                let Some(dout) = self.taken(out) else { return };
                let clamp = T::LOG_CLAMP;
                let raw = self.nodes[score.0].data[0];
                let s = raw.max(clamp).min(T::one() - clamp);
                let y = T::from_f64(label);
                // d/ds [−y ln s − (1−y) ln(1−s)] = −y/s + (1−y)/(1−s)
                let ds = if raw > clamp && raw < T::one() - clamp {
                    dout[0] * (-y / s + (T::one() - y) / (T::one() - s))
                } else {
                    T::zero()
                };
                self.acc(score, &[ds]);
            }
        }
    }

    // ── replay ──────────────────────────────────────────────────────────

    /// Recompute every op output from current leaf values, reusing the
    /// recorded masks and ids. Refused for graphs that sampled dropout.
    pub fn replay_forward(&mut self) -> Result<()> {
        if self.stochastic {
            return Err(Error::Config(
                "replay_forward on a stochastic graph; build it in eval mode".into(),
            ));
        }
        for oi in 0..self.ops.len() {
            let op = self.ops[oi].clone();
            self.step_forward(&op);
        }
        Ok(())
    }

    fn step_forward(&mut self, op: &Op) {
        match *op {
            Op::MatMul { a, b, out, m, k, n } => {
                self.nodes[out.0].data = math::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
            }
            Op::VecMat { x, w, out, k, n } => {
                self.nodes[out.0].data = math::matmul(&self.nodes[x.0].data, &self.nodes[w.0].data, 1, k, n);
            }
            Op::Transpose { x, out, rows, cols } => {
                self.nodes[out.0].data = math::transpose(&self.nodes[x.0].data, rows, cols);
            }
            Op::Add { a, b, out } => {
                self.nodes[out.0].data = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&x, &y)| x + y)
                    .collect();
            }
            Op::Mul { a, b, out } => {
                self.nodes[out.0].data = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&x, &y)| x * y)
                    .collect();
            }
            Op::AddRowBroadcast { x, bias, out, rows, cols } => {
                let mut data = self.nodes[x.0].data.clone();
                for r in 0..rows {
                    for j in 0..cols {
                        data[r * cols + j] += self.nodes[bias.0].data[j];
                    }
                }
                self.nodes[out.0].data = data;
            }
            Op::Scale { x, out, c } => {
                let cc = T::from_f64(c);
                self.nodes[out.0].data = self.nodes[x.0].data.iter().map(|&v| v * cc).collect();
            }
            Op::AffineCombine { x, y, out, a, b } => {
                let (ca, cb) = (T::from_f64(a), T::from_f64(b));
                self.nodes[out.0].data = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(&self.nodes[y.0].data)
                    .map(|(&u, &v)| ca * u + cb * v)
                    .collect();
            }
            Op::Softmax { x, out, rows, cols } => {
                self.nodes[out.0].data = math::softmax_rows(&self.nodes[x.0].data, rows, cols);
            }
            Op::LayerNorm { x, gamma, beta, out, rows, cols, eps } => {
                self.nodes[out.0].data = math::layer_norm_rows(
                    &self.nodes[x.0].data,
                    &self.nodes[gamma.0].data,
                    &self.nodes[beta.0].data,
                    rows,
                    cols,
                    eps,
                );
            }
            Op::Gelu { x, out } => {
                self.nodes[out.0].data = self.nodes[x.0].data.iter().map(|&v| math::gelu(v)).collect();
            }
            Op::Sigmoid { x, out } => {
                self.nodes[out.0].data = self.nodes[x.0].data.iter().map(|&v| math::sigmoid(v)).collect();
            }
            Op::Ln { x, out } => {
                self.nodes[out.0].data = self.nodes[x.0].data.iter().map(|&v| v.ln()).collect();
            }
            Op::Exp { x, out } => {
                self.nodes[out.0].data = self.nodes[x.0].data.iter().map(|&v| v.exp()).collect();
            }
            Op::MeanAxis { x, out, rows, cols, axis } => {
                self.nodes[out.0].data = mean_axis_forward(&self.nodes[x.0].data, rows, cols, axis);
            }
            Op::MaskedMeanRows { x, out, rows, cols, ref mask } => {
                let live = mask.iter().filter(|&&m| m != 0).count();
                self.nodes[out.0].data = masked_mean_forward(&self.nodes[x.0].data, rows, cols, mask, live);
            }
            Op::ConcatCols { ref xs, out, rows, ref widths } => {
                let total: usize = widths.iter().sum();
                let mut data = vec![T::zero(); rows * total];
                let mut off = 0;
                for (xi, &x) in xs.iter().enumerate() {
                    let w = widths[xi];
                    for r in 0..rows {
                        let src = &self.nodes[x.0].data[r * w..(r + 1) * w];
                        data[r * total + off..r * total + off + w].copy_from_slice(src);
                    }
                    off += w;
                }
                self.nodes[out.0].data = data;
            }
            Op::SliceCols { x, out, rows, cols, lo, hi } => {
                let w = hi - lo;
                let mut data = vec![T::zero(); rows * w];
                for r in 0..rows {
                    data[r * w..(r + 1) * w]
                        .copy_from_slice(&self.nodes[x.0].data[r * cols + lo..r * cols + hi]);
                }
                self.nodes[out.0].data = data;
            }
            Op::Index { x, out, at } => {
                self.nodes[out.0].data = vec![self.nodes[x.0].data[at]];
            }
            Op::Reshape { x, out } => {
                self.nodes[out.0].data = self.nodes[x.0].data.clone();
            }
            Op::Embedding { table, out, ref ids, dim } => {
                let mut data = vec![T::zero(); ids.len() * dim];
                for (r, &id) in ids.iter().enumerate() {
                    data[r * dim..(r + 1) * dim]
                        .copy_from_slice(&self.nodes[table.0].data[id * dim..(id + 1) * dim]);
                }
                self.nodes[out.0].data = data;
            }
            Op::KeyMaskBias { x, out, rows, cols, ref mask } => {
                let neg = T::from_f64(NEG_MASK);
                let mut data = self.nodes[x.0].data.clone();
                for r in 0..rows {
                    for j in 0..cols {
                        if mask[j] == 0 {
                            data[r * cols + j] += neg;
                        }
                    }
                }
                self.nodes[out.0].data = data;
            }
            Op::Dropout { x, out, ref mask, keep } => {
                let inv = T::from_f64(1.0 / keep);
                self.nodes[out.0].data = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v * inv } else { T::zero() })
                    .collect();
            }
            Op::Mix { x, y, lam, out } => {
                let l = self.nodes[lam.0].data[0];
                self.nodes[out.0].data = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(&self.nodes[y.0].data)
                    .map(|(&u, &v)| l * u + (T::one() - l) * v)
                    .collect();
            }
            Op::SumAll { x, out } => {
                let mut s = T::zero();
                for &v in &self.nodes[x.0].data {
                    s += v;
                }
                self.nodes[out.0].data = vec![s];
            }
            Op::MeanScalars { ref xs, out } => {
                let mut s = T::zero();
                for &x in xs {
                    s += self.nodes[x.0].data[0];
                }
                self.nodes[out.0].data = vec![s / T::from_f64(xs.len() as f64)];
            }
            Op::KlLoss { pred, target, out } => {
                self.nodes[out.0].data = vec![kl_forward(&self.nodes[pred.0].data, &self.nodes[target.0].data)];
            }
            Op::BceLoss { score, out, label } => {
                self.nodes[out.0].data = vec![bce_forward(self.nodes[score.0].data[0], T::from_f64(label))];
            }
        }
    }
}

fn mean_axis_forward<T: Scalar>(x: &[T], rows: usize, cols: usize, axis: usize) -> Vec<T> {
    if axis == 0 {
        let inv = T::from_f64(1.0 / rows as f64);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for j in 0..cols {
                out[j] += x[r * cols + j];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        out
    } else {
        let inv = T::from_f64(1.0 / cols as f64);
        let mut out = vec![T::zero(); rows];
        for r in 0..rows {
            let mut s = T::zero();
            for j in 0..cols {
                s += x[r * cols + j];
            }
            out[r] = s * inv;
        }
        out
    }
}

fn masked_mean_forward<T: Scalar>(x: &[T], rows: usize, cols: usize, mask: &[u8], live: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / live as f64);
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        if mask[r] == 0 {
            continue;
        }
        for j in 0..cols {
            out[j] += x[r * cols + j];
        }
    }
    for v in out.iter_mut() {
        *v = *v * inv;
    }
    out
}

fn check_distribution<T: Scalar>(what: &'static str, p: &[T]) -> Result<()> {
    let tol = T::NORM_TOL;
    let mut sum = T::zero();
    for &v in p {
        if v < -tol {
            return Err(Error::shape(what, format!("negative probability {}", v)));
        }
        sum += v;
    }
    if (sum - T::one()).abs() > tol {
        return Err(Error::shape(what, format!("sums to {}", sum)));
    }
    Ok(())
}

fn kl_forward<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let clamp = T::LOG_CLAMP;
    let mut s = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        if t <= T::zero() {
            continue; // 0·ln 0 ≡ 0
        }
        let p = p.max(clamp);
        let t = t.max(clamp);
        s += t * (t.ln() - p.ln());
    }
    s
}

fn bce_forward<T: Scalar>(score: T, label: T) -> T {
    let clamp = T::LOG_CLAMP;
    let s = score.max(clamp).min(T::one() - clamp);
    -(label * s.ln() + (T::one() - label) * (T::one() - s).ln())
}
