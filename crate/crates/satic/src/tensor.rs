//! Dense `f64` tensors and the raw numeric kernels behind the graph ops.
//!
//! Everything is row-major and 64-bit. Desk-scale shapes make the numeric
//! type's speed irrelevant while the finite-difference gradient checks need
//! the precision. The kernels here are pure functions over slices; the
//! recorded-graph layer in [`crate::graph`] calls them for both forward and
//! backward so there is a single source of truth for the math.

use crate::error::{Error, Result};

/// N-dimensional array of `f64` values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == values.len()`.
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "shape {:?} wants {} values, got {}",
            shape,
            numel,
            values.len()
        );
        Tensor {
            shape,
            values,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// 2-D constructor.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Row count for 1-D or 2-D tensors (a 1-D tensor is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Last-dimension size.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Gradient accumulator, if one has been attached.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient accumulator, allocating zeros first if
    /// absent. The accumulator always has the tensor's own shape.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.values.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Stacks equal-width 2-D tensors on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let cols = parts[0].cols();
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), cols, "vstack width mismatch");
            rows += p.rows();
            values.extend_from_slice(p.values());
        }
        Tensor::matrix(rows, cols, values)
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. `*_acc` variants accumulate into the output.
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] x B[k,n].
pub fn matmul_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(0.0);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// C[m,n] += A[m,k] x B[n,k]^T  (rows of A dotted with rows of B).
pub fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ij += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T x B[m,n].
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij;
            }
        }
    }
}

/// Row-wise softmax with an optional additive mask row per output row.
///
/// `mask_row(i)` returns the additive mask slice for row `i` (entries are 0
/// or `-inf`) or `None` for an unmasked row. Masked positions get weight
/// exactly 0.0; the max subtraction runs over unmasked positions only, so
/// `-inf` never reaches `exp`. A fully masked row is an error.
pub fn softmax_rows_masked<'m>(
    out: &mut [f64],
    logits: &[f64],
    rows: usize,
    cols: usize,
    mask_row: impl Fn(usize) -> Option<&'m [f64]>,
) -> Result<()> {
    debug_assert_eq!(logits.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        let x = &logits[i * cols..(i + 1) * cols];
        let y = &mut out[i * cols..(i + 1) * cols];
        let mask = mask_row(i);
        let mut max = f64::NEG_INFINITY;
        match mask {
            None => {
                for &v in x {
                    if v > max {
                        max = v;
                    }
                }
            }
            Some(m) => {
                debug_assert_eq!(m.len(), cols);
                for (j, &v) in x.iter().enumerate() {
                    if m[j] == 0.0 && v > max {
                        max = v;
                    }
                }
            }
        }
        if !max.is_finite() {
            return Err(Error::DegenerateAttentionRow { row: i });
        }
        let mut sum = 0.0;
        for j in 0..cols {
            let masked_off = mask.map(|m| m[j] != 0.0).unwrap_or(false);
            if masked_off {
                y[j] = 0.0;
            } else {
                let e = (x[j] - max).exp();
                y[j] = e;
                sum += e;
            }
        }
        for v in y.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

/// Backward of row-wise softmax: dx = y * (dy - sum(dy * y)) per row.
/// Masked positions have y = 0 and therefore get zero gradient for free.
pub fn softmax_rows_backward(dx: &mut [f64], y: &[f64], dy: &[f64], rows: usize, cols: usize) {
    for i in 0..rows {
        let y_row = &y[i * cols..(i + 1) * cols];
        let dy_row = &dy[i * cols..(i + 1) * cols];
        let dx_row = &mut dx[i * cols..(i + 1) * cols];
        let dot: f64 = y_row.iter().zip(dy_row).map(|(&a, &b)| a * b).sum();
        for j in 0..cols {
            dx_row[j] += y_row[j] * (dy_row[j] - dot);
        }
    }
}

/// Per-row layer normalization. Returns `(x_hat, inv_std)` for backward.
pub fn layer_norm_into(
    out: &mut [f64],
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut x_hat = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..cols {
            let xh = (row[j] - mean) * is;
            x_hat[i * cols + j] = xh;
            out[i * cols + j] = gain[j] * xh + bias[j];
        }
    }
    (x_hat, inv_std)
}

/// Backward of layer norm given the saved `(x_hat, inv_std)`.
pub fn layer_norm_backward(
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dy: &[f64],
    gain: &[f64],
    x_hat: &[f64],
    inv_std: &[f64],
    rows: usize,
    cols: usize,
) {
    let n = cols as f64;
    for i in 0..rows {
        let dy_row = &dy[i * cols..(i + 1) * cols];
        let xh_row = &x_hat[i * cols..(i + 1) * cols];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..cols {
            let dxh = dy_row[j] * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh_row[j];
            dgain[j] += dy_row[j] * xh_row[j];
            dbias[j] += dy_row[j];
        }
        let dx_row = &mut dx[i * cols..(i + 1) * cols];
        for j in 0..cols {
            let dxh = dy_row[j] * gain[j];
            dx_row[j] += inv_std[i] * (dxh - sum_dxhat / n - xh_row[j] * sum_dxhat_xhat / n);
        }
    }
}

/// Sinusoidal position encoding table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn position_encoding_table(max_pos: usize, d_model: usize) -> Tensor {
    let mut values = vec![0.0; max_pos * d_model];
    for pos in 0..max_pos {
        for i in 0..d_model / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            values[pos * d_model + 2 * i] = rate.sin();
            values[pos * d_model + 2 * i + 1] = rate.cos();
        }
        if d_model % 2 == 1 {
            let i = d_model / 2;
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            values[pos * d_model + 2 * i] = rate.sin();
        }
    }
    Tensor::matrix(max_pos, d_model, values)
}
