//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every executed operation in order; [`Graph::backward`]
//! walks the record in exact reverse order and accumulates (`+=`) gradients
//! into per-node buffers. The scheme is deliberately plain: the architecture
//! is fixed, so an explicit operation enum plus saved auxiliaries is the
//! simplest correct thing.
//!
//! Forward math lives in [`crate::tensor`]; this module only wires recording
//! and the adjoint rules together.

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::rng::SplitMix64;
use crate::tensor::{
    layer_norm_backward, layer_norm_into, matmul_into, matmul_nt_acc, matmul_tn_acc,
    softmax_rows_backward, softmax_rows_masked, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Loss reduction for [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over non-pad positions (the default everywhere).
    Mean,
    /// Plain sum over non-pad positions.
    Sum,
}

enum Op {
    Leaf,
    /// C = A x B.
    Matmul { a: usize, b: usize },
    /// C = A x B^T.
    MatmulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// Row broadcast: X + b.
    AddBias { x: usize, b: usize },
    /// X + constant rows (no gradient into the constant).
    AddConst { x: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    /// Backward needs only the node's own output.
    MaskedSoftmax { x: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Elementwise multiply by the saved keep mask (already 1/keep scaled).
    Dropout { x: usize, mask: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<usize>,
        pad: usize,
        scale: f64,
    },
    /// Per-row log softmax gathered at given ids; saves the full probs.
    LogSoftmaxGather {
        logits: usize,
        probs: Vec<f64>,
        ids: Vec<usize>,
    },
    Sum { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations, plus per-node gradient buffers.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf from raw matrix data.
    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        self.leaf(Tensor::matrix(rows, cols, values))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after [`Graph::backward`]; `None` means the node
    /// was not reached (its gradient is zero).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // -- recorded operations -------------------------------------------------

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, ta.values(), tb.values(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::Matmul { a: a.0, b: b.0 }))
    }

    /// `[m,k] x [n,k]^T -> [m,n]` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&mut out, ta.values(), tb.values(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatmulNT { a: a.0, b: b.0 }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(ta.shape().to_vec(), values);
        self.push(t, Op::Add { a: a.0, b: b.0 })
    }

    /// `x + bias` broadcast over rows; `bias` is a width-matching vector.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (rows, cols) = (tx.rows(), tx.cols());
        assert_eq!(tb.numel(), cols, "bias width mismatch");
        let mut values = tx.values().to_vec();
        for r in 0..rows {
            for (v, &bj) in values[r * cols..(r + 1) * cols].iter_mut().zip(tb.values()) {
                *v += bj;
            }
        }
        self.push(Tensor::matrix(rows, cols, values), Op::AddBias { x: x.0, b: b.0 })
    }

    /// `x + rows` where `rows` is a constant tensor (e.g. position
    /// encodings). No gradient flows into the constant.
    pub fn add_const(&mut self, x: Var, rows: &Tensor) -> Var {
        let tx = &self.nodes[x.0].value;
        assert_eq!(tx.shape(), rows.shape(), "add_const shape mismatch");
        let values = tx
            .values()
            .iter()
            .zip(rows.values())
            .map(|(&a, &b)| a + b)
            .collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), values);
        self.push(t, Op::AddConst { x: x.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let values = tx.values().iter().map(|&v| v * c).collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), values);
        self.push(t, Op::Scale { x: x.0, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let values = tx.values().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), values);
        self.push(t, Op::Relu { x: x.0 })
    }

    /// Row-wise softmax over the last dimension with an optional additive
    /// attention mask. When a mask is given the logits must be `T x T` with
    /// `T == mask.len()`; masked positions receive weight exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        if let Some(m) = mask {
            if rows != m.len() || cols != m.len() {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax",
                    left: tx.shape().to_vec(),
                    right: vec![m.len(), m.len()],
                });
            }
        }
        let mut out = vec![0.0; rows * cols];
        softmax_rows_masked(&mut out, tx.values(), rows, cols, |i| {
            mask.map(|m| m.row(i))
        })?;
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::MaskedSoftmax { x: x.0 }))
    }

    /// Per-row normalization to zero mean and unit variance, then an affine
    /// map by `gain` and `bias` (both of the row width).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        let tg = &self.nodes[gain.0].value;
        let tb = &self.nodes[bias.0].value;
        assert_eq!(tg.numel(), cols, "layer_norm gain width");
        assert_eq!(tb.numel(), cols, "layer_norm bias width");
        let mut out = vec![0.0; rows * cols];
        let (x_hat, inv_std) = layer_norm_into(
            &mut out,
            tx.values(),
            tg.values(),
            tb.values(),
            rows,
            cols,
            eps,
        );
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                x_hat,
                inv_std,
            },
        )
    }

    /// Inverted dropout: at `p == 0` this is the identity map and records
    /// nothing. Kept values are scaled by `1/(1-p)` so inference needs no
    /// rescaling.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut SplitMix64) -> Var {
        if p == 0.0 {
            return x;
        }
        assert!((0.0..1.0).contains(&p), "dropout probability {p}");
        let keep_scale = 1.0 / (1.0 - p);
        let tx = &self.nodes[x.0].value;
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep_scale })
            .collect();
        let values = tx
            .values()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::from_vec(tx.shape().to_vec(), values);
        self.push(t, Op::Dropout { x: x.0, mask })
    }

    /// Gathers rows of `table` at `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (vocab, d) = (tt.rows(), tt.cols());
        let mut values = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            values.extend_from_slice(tt.row(id));
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), d, values),
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Column slice `[.., start..start+len]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&tx.values()[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::matrix(rows, len, values), Op::SliceCols { x: x.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].value;
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                values.extend_from_slice(t.row(r));
            }
        }
        self.push(
            Tensor::matrix(rows, total, values),
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    /// Row slice `[start..start+len, ..]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        assert!(start + len <= rows, "slice_rows out of range");
        let values = tx.values()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::matrix(len, cols, values), Op::SliceRows { x: x.0, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            rows += t.rows();
            values.extend_from_slice(t.values());
        }
        self.push(
            Tensor::matrix(rows, cols, values),
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    /// Token-level cross entropy `-log softmax(logits)[t, target_t]` over
    /// non-pad positions, reduced to a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad: usize,
        reduction: Reduction,
    ) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (rows, vocab) = (tl.rows(), tl.cols());
        assert_eq!(rows, targets.len(), "cross_entropy target count");
        let n_counted = targets.iter().filter(|&&t| t != pad).count();
        if n_counted == 0 {
            return Err(Error::EmptyLoss);
        }
        for &t in targets {
            if t != pad && t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
        }
        let mut probs = vec![0.0; rows * vocab];
        softmax_rows_masked(&mut probs, tl.values(), rows, vocab, |_| None)?;
        let scale = match reduction {
            Reduction::Mean => 1.0 / n_counted as f64,
            Reduction::Sum => 1.0,
        };
        let mut loss = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            if target == pad {
                continue;
            }
            loss -= probs[t * vocab + target].ln();
        }
        loss *= scale;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                pad,
                scale,
            },
        ))
    }

    /// `log softmax(logits)` gathered at one id per row; output is a
    /// length-`rows` vector of log probabilities.
    pub fn log_softmax_gather(&mut self, logits: Var, ids: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (rows, vocab) = (tl.rows(), tl.cols());
        assert_eq!(rows, ids.len(), "log_softmax_gather id count");
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
        }
        let mut probs = vec![0.0; rows * vocab];
        softmax_rows_masked(&mut probs, tl.values(), rows, vocab, |_| None)?;
        let values: Vec<f64> = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| probs[t * vocab + id].ln())
            .collect();
        Ok(self.push(
            Tensor::from_vec(vec![rows], values),
            Op::LogSoftmaxGather {
                logits: logits.0,
                probs,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.values().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 })
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Every reachable node gets its
    /// gradient accumulated; leaves can then be read with [`Graph::grad`].
    /// Calling this twice without recording a new forward pass is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRan);
        }
        self.backward_done = true;
        let loss_node = &self.nodes[loss.0].value;
        assert!(loss_node.is_scalar(), "backward needs a scalar loss");
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Re-attach (leaves keep their gradient readable afterwards).
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f64> {
        let numel = self.nodes[idx].value.numel();
        self.grads[idx].get_or_insert_with(|| vec![0.0; numel])
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Split borrows: values are read-only, grads are written.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let t = &self.nodes[a].value;
                    (t.rows(), t.cols())
                };
                let n = self.nodes[b].value.cols();
                let a_vals = self.nodes[a].value.values().to_vec();
                let b_vals = self.nodes[b].value.values().to_vec();
                matmul_nt_acc(self.grad_buf(a), g, &b_vals, m, n, k);
                matmul_tn_acc(self.grad_buf(b), &a_vals, g, m, k, n);
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let t = &self.nodes[a].value;
                    (t.rows(), t.cols())
                };
                let n = self.nodes[b].value.rows();
                let a_vals = self.nodes[a].value.values().to_vec();
                let b_vals = self.nodes[b].value.values().to_vec();
                // dA += dC x B;  dB += dC^T x A.
                {
                    let buf = self.grad_buf(a);
                    let mut tmp = vec![0.0; m * k];
                    matmul_into(&mut tmp, g, &b_vals, m, n, k);
                    for (x, t) in buf.iter_mut().zip(&tmp) {
                        *x += t;
                    }
                }
                matmul_tn_acc(self.grad_buf(b), g, &a_vals, m, n, k);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for (x, &d) in self.grad_buf(a).iter_mut().zip(g) {
                    *x += d;
                }
                for (x, &d) in self.grad_buf(b).iter_mut().zip(g) {
                    *x += d;
                }
            }
            Op::AddBias { x, b } => {
                let (x, b) = (*x, *b);
                let cols = self.nodes[b].value.numel();
                for (gx, &d) in self.grad_buf(x).iter_mut().zip(g) {
                    *gx += d;
                }
                let gb = self.grad_buf(b);
                for (j, &d) in g.iter().enumerate() {
                    gb[j % cols] += d;
                }
            }
            Op::AddConst { x } => {
                let x = *x;
                for (gx, &d) in self.grad_buf(x).iter_mut().zip(g) {
                    *gx += d;
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                for (gx, &d) in self.grad_buf(x).iter_mut().zip(g) {
                    *gx += c * d;
                }
            }
            Op::Relu { x } => {
                let x = *x;
                let x_vals = self.nodes[x].value.values().to_vec();
                for ((gx, &d), &xv) in self.grad_buf(x).iter_mut().zip(g).zip(&x_vals) {
                    if xv > 0.0 {
                        *gx += d;
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let x = *x;
                let y = &self.nodes[i].value;
                let (rows, cols) = (y.rows(), y.cols());
                let y_vals = y.values().to_vec();
                softmax_rows_backward(self.grad_buf(x), &y_vals, g, rows, cols);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let x_hat = x_hat.clone();
                let inv_std = inv_std.clone();
                let cols = self.nodes[gain].value.numel();
                let rows = inv_std.len();
                let gain_vals = self.nodes[gain].value.values().to_vec();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                layer_norm_backward(
                    &mut dx, &mut dgain, &mut dbias, g, &gain_vals, &x_hat, &inv_std, rows, cols,
                );
                for (b, d) in self.grad_buf(x).iter_mut().zip(&dx) {
                    *b += d;
                }
                for (b, d) in self.grad_buf(gain).iter_mut().zip(&dgain) {
                    *b += d;
                }
                for (b, d) in self.grad_buf(bias).iter_mut().zip(&dbias) {
                    *b += d;
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                for ((gx, &d), &m) in self.grad_buf(x).iter_mut().zip(g).zip(&mask) {
                    *gx += d * m;
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table].value.cols();
                let gt = self.grad_buf(table);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let cols = self.nodes[x].value.cols();
                let out_cols = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let gx = self.grad_buf(x);
                for r in 0..rows {
                    for j in 0..out_cols {
                        gx[r * cols + start + j] += g[r * out_cols + j];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let rows = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.nodes[p].value.cols()).collect();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let gp = self.grad_buf(p);
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let cols = self.nodes[i].value.cols();
                let gx = self.grad_buf(x);
                for (slot, &d) in gx[start * cols..].iter_mut().zip(g) {
                    *slot += d;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p].value.numel();
                    let gp = self.grad_buf(p);
                    for (slot, &d) in gp.iter_mut().zip(&g[offset..offset + n]) {
                        *slot += d;
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                pad,
                scale,
            } => {
                let logits = *logits;
                let (pad, scale) = (*pad, *scale);
                let probs = probs.clone();
                let targets = targets.clone();
                let vocab = self.nodes[logits].value.cols();
                let upstream = g[0] * scale;
                let gl = self.grad_buf(logits);
                for (t, &target) in targets.iter().enumerate() {
                    if target == pad {
                        continue;
                    }
                    let row = &probs[t * vocab..(t + 1) * vocab];
                    for (j, &p) in row.iter().enumerate() {
                        let indicator = if j == target { 1.0 } else { 0.0 };
                        gl[t * vocab + j] += upstream * (p - indicator);
                    }
                }
            }
            Op::LogSoftmaxGather { logits, probs, ids } => {
                let logits = *logits;
                let probs = probs.clone();
                let ids = ids.clone();
                let vocab = self.nodes[logits].value.cols();
                let gl = self.grad_buf(logits);
                for (t, &id) in ids.iter().enumerate() {
                    let gt = g[t];
                    if gt == 0.0 {
                        continue;
                    }
                    let row = &probs[t * vocab..(t + 1) * vocab];
                    for (j, &p) in row.iter().enumerate() {
                        let indicator = if j == id { 1.0 } else { 0.0 };
                        gl[t * vocab + j] += gt * (indicator - p);
                    }
                }
            }
            Op::Sum { x } => {
                let x = *x;
                for gx in self.grad_buf(x).iter_mut() {
                    *gx += g[0];
                }
            }
        }
    }
}

pub mod gradcheck {
    //! Central finite-difference oracle for gradient checks. Independent of
    //! the recorded backward pass: it only re-evaluates a forward closure.

    /// d loss / d x[i] via central differences with step `h`.
    pub fn finite_diff(mut loss: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = loss(&probe);
            probe[i] = orig - h;
            let down = loss(&probe);
            probe[i] = orig;
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    /// Relative-tolerance agreement between an analytic and a numeric
    /// gradient, with a small absolute floor for near-zero entries.
    pub fn assert_close(analytic: &[f64], numeric: &[f64], rtol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let tol = rtol * a.abs().max(n.abs()).max(1e-4);
            assert!(
                (a - n).abs() <= tol,
                "{what}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{assert_close, finite_diff};
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_at_three_gives_six() {
        // loss = x * x at x = 3 -> dx = 6 (via a 1x1 matmul).
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 1, vec![3.0]));
        let y = g.matmul(x, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardAlreadyRan)));
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let orphan = g.leaf(Tensor::scalar(5.0));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(orphan).is_none());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        // Random 4x5 by 5x3, rtol 1e-4 with h = 1e-5.
        let mut rng = SplitMix64::new(21);
        let a0 = random_matrix(&mut rng, 4, 5);
        let b0 = random_matrix(&mut rng, 5, 3);
        let weights = random_matrix(&mut rng, 4 * 3, 1);

        let run = |a_vals: &[f64], b_vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::matrix(4, 5, a_vals.to_vec()));
            let b = g.leaf(Tensor::matrix(5, 3, b_vals.to_vec()));
            let c = g.matmul(a, b).unwrap();
            // Weighted sum so every output entry matters differently.
            g.value(c)
                .values()
                .iter()
                .zip(weights.values())
                .map(|(&x, &w)| x * w)
                .sum()
        };

        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let b = g.leaf(b0.clone());
        let c = g.matmul(a, b).unwrap();
        let wv = g.leaf(Tensor::matrix(4 * 3, 1, weights.values().to_vec()));
        // loss = sum(C * W) elementwise, built from per-row dot products.
        let mut total = None;
        for r in 0..4 {
            let row = g.slice_rows(c, r, 1);
            let wrow = g.slice_rows(wv, r * 3, 3);
            let dot = g.matmul(row, wrow).unwrap();
            total = Some(match total {
                None => dot,
                Some(t) => g.add(t, dot),
            });
        }
        let loss = total.unwrap();
        g.backward(loss).unwrap();

        let ga = g.grad(a).unwrap().to_vec();
        let gb = g.grad(b).unwrap().to_vec();
        let fa = finite_diff(|x| run(x, b0.values()), a0.values(), 1e-5);
        let fb = finite_diff(|x| run(a0.values(), x), b0.values(), 1e-5);
        assert_close(&ga, &fa, 1e-4, "dA");
        assert_close(&gb, &fb, 1e-4, "dB");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(33);
        let x0 = random_matrix(&mut rng, 3, 6);
        let gain0 = random_matrix(&mut rng, 1, 6);
        let bias0 = random_matrix(&mut rng, 1, 6);

        let run = |xv: &[f64], gv: &[f64], bv: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::matrix(3, 6, xv.to_vec()));
            let gain = g.leaf(Tensor::matrix(1, 6, gv.to_vec()));
            let bias = g.leaf(Tensor::matrix(1, 6, bv.to_vec()));
            let y = g.layer_norm(x, gain, bias, 1e-5);
            let r = g.relu(y);
            let s = g.sum(r);
            g.value(s).item()
        };

        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let gain = g.leaf(gain0.clone());
        let bias = g.leaf(bias0.clone());
        let y = g.layer_norm(x, gain, bias, 1e-5);
        let r = g.relu(y);
        let loss = g.sum(r);
        g.backward(loss).unwrap();

        let fx = finite_diff(|v| run(v, gain0.values(), bias0.values()), x0.values(), 1e-5);
        let fg = finite_diff(|v| run(x0.values(), v, bias0.values()), gain0.values(), 1e-5);
        let fb = finite_diff(|v| run(x0.values(), gain0.values(), v), bias0.values(), 1e-5);
        assert_close(g.grad(x).unwrap(), &fx, 1e-4, "dx");
        assert_close(g.grad(gain).unwrap(), &fg, 1e-4, "dgain");
        assert_close(g.grad(bias).unwrap(), &fb, 1e-4, "dbias");
    }

    #[test]
    fn cross_entropy_saturated_prediction_is_near_zero() {
        let mut g = Graph::new();
        let mut vals = vec![0.0; 2 * 5];
        vals[0 * 5 + 2] = 1e9;
        vals[1 * 5 + 4] = 1e9;
        let logits = g.leaf(Tensor::matrix(2, 5, vals));
        let loss = g
            .cross_entropy(logits, &[2, 4], usize::MAX, Reduction::Mean)
            .unwrap();
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![3, 10]));
        let loss = g
            .cross_entropy(logits, &[0, 5, 9], usize::MAX, Reduction::Mean)
            .unwrap();
        assert!((g.value(loss).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = SplitMix64::new(5);
        let logits0 = random_matrix(&mut rng, 4, 7);
        let targets = [3usize, 0, 6, 2];
        let mut g = Graph::new();
        let logits = g.leaf(logits0.clone());
        let loss = g
            .cross_entropy(logits, &targets, usize::MAX, Reduction::Mean)
            .unwrap();
        // Direct evaluation: mean over rows of (logsumexp(row) - row[target]).
        let mut expect = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            let row = logits0.row(t);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[target];
        }
        expect /= targets.len() as f64;
        assert!((g.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_all_pad_is_error() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![2, 4]));
        assert!(matches!(
            g.cross_entropy(logits, &[0, 0], 0, Reduction::Mean),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(6);
        let logits0 = random_matrix(&mut rng, 3, 6);
        let targets = [1usize, 0, 5]; // position 1 will be padded out below
        let pad = 0usize;

        let run = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let logits = g.leaf(Tensor::matrix(3, 6, vals.to_vec()));
            let loss = g.cross_entropy(logits, &targets, pad, Reduction::Mean).unwrap();
            g.value(loss).item()
        };

        let mut g = Graph::new();
        let logits = g.leaf(logits0.clone());
        let loss = g.cross_entropy(logits, &targets, pad, Reduction::Mean).unwrap();
        g.backward(loss).unwrap();
        let fd = finite_diff(run, logits0.values(), 1e-5);
        assert_close(g.grad(logits).unwrap(), &fd, 1e-4, "dlogits");
        // Padded row gets exactly zero gradient.
        let gl = g.grad(logits).unwrap();
        assert!(gl[6..12].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_softmax_gradient_matches_finite_differences() {
        use crate::masks::relaxed_mask;
        let mut rng = SplitMix64::new(77);
        let x0 = random_matrix(&mut rng, 6, 6);
        let mask = relaxed_mask(6, 2);
        let weights: Vec<f64> = (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let run = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::matrix(6, 6, vals.to_vec()));
            let y = g.masked_softmax(x, Some(&mask)).unwrap();
            g.value(y)
                .values()
                .iter()
                .zip(&weights)
                .map(|(&v, &w)| v * w)
                .sum()
        };

        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = g.masked_softmax(x, Some(&mask)).unwrap();
        let w = g.leaf(Tensor::matrix(6, 6, weights.clone()));
        // loss = sum(y * w) elementwise via row dots.
        let mut total = None;
        for r in 0..6 {
            let yr = g.slice_rows(y, r, 1);
            let wr = g.slice_rows(w, r, 1);
            let dot = g.matmul_nt(yr, wr).unwrap();
            total = Some(match total {
                None => dot,
                Some(t) => g.add(t, dot),
            });
        }
        let loss = total.unwrap();
        g.backward(loss).unwrap();
        let fd = finite_diff(run, x0.values(), 1e-6);
        assert_close(g.grad(x).unwrap(), &fd, 1e-4, "dx");
    }

    #[test]
    fn embedding_scatters_gradients_to_rows() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::matrix(4, 2, vec![0.0; 8]));
        let e = g.embedding(table, &[1, 3, 1]).unwrap();
        let loss = g.sum(e);
        g.backward(loss).unwrap();
        let gt = g.grad(table).unwrap();
        assert_eq!(gt, &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::matrix(4, 2, vec![0.0; 8]));
        assert!(matches!(
            g.embedding(table, &[4]),
            Err(Error::TokenOutOfRange { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn dropout_at_zero_probability_is_identity() {
        let mut g = Graph::new();
        let mut rng = SplitMix64::new(1);
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
        assert_eq!(g.len(), 1); // nothing recorded
    }

    #[test]
    fn dropout_scales_kept_values() {
        let mut g = Graph::new();
        let mut rng = SplitMix64::new(2);
        let x = g.leaf(Tensor::matrix(1, 1000, vec![1.0; 1000]));
        let y = g.dropout(x, 0.5, &mut rng);
        let vals = g.value(y).values();
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        assert!((400..600).contains(&kept), "kept {kept}");
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let build = || {
            let mut rng = SplitMix64::new(99);
            let mut g = Graph::new();
            let x = g.leaf(random_matrix(&mut rng, 3, 4));
            let w = g.leaf(random_matrix(&mut rng, 4, 4));
            let h = g.matmul(x, w).unwrap();
            let r = g.relu(h);
            let s = g.masked_softmax(r, None).unwrap();
            g.value(s).values().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn log_softmax_gather_matches_definition() {
        let mut rng = SplitMix64::new(8);
        let logits0 = random_matrix(&mut rng, 3, 5);
        let ids = [4usize, 2, 0];
        let mut g = Graph::new();
        let logits = g.leaf(logits0.clone());
        let lp = g.log_softmax_gather(logits, &ids).unwrap();
        for (t, &id) in ids.iter().enumerate() {
            let row = logits0.row(t);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            let expect = row[id] - lse;
            assert!((g.value(lp).values()[t] - expect).abs() < 1e-12);
        }
    }
}
