use super::matrix::{gemm, Matrix};
use super::NumError;

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Normalises every row to zero mean and unit variance (no affine part).
/// Returns the normalised rows and the per-row reciprocal standard deviation.
pub fn layer_norm_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        rstd.push(inv);
    }
    (out, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
}

/// Options for [`attention`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionOpts {
    pub mask: Mask,
    /// Multiply scores by `1/sqrt(q.cols)`.
    pub scaled: bool,
    /// Linear penalty `slope * (i - j)` subtracted from the score of query
    /// `i` on key `j`. Zero disables it.
    pub recency_slope: f64,
    /// Absolute index of query row 0 relative to key row 0. Query row `i`
    /// may see keys `0..=query_offset + i` under a causal mask.
    pub query_offset: usize,
}

impl AttentionOpts {
    pub fn new(mask: Mask, scaled: bool) -> Self {
        Self { mask, scaled, recency_slope: 0.0, query_offset: 0 }
    }

    fn scale(&self, dim: usize) -> f64 {
        if self.scaled {
            1.0 / (dim as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Number of visible keys for query row `i` out of `n_keys`.
    #[inline]
    fn visible(&self, i: usize, n_keys: usize) -> usize {
        match self.mask {
            Mask::None => n_keys,
            Mask::Causal => (self.query_offset + i + 1).min(n_keys),
        }
    }
}

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(), NumError> {
    if q.cols() != k.cols() {
        return Err(NumError::shape("attention q/k", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(NumError::shape("attention k/v", k.shape(), v.shape()));
    }
    Ok(())
}

/// `softmax(q·kᵀ [·scale] + bias) · v`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, opts: AttentionOpts) -> Result<Matrix, NumError> {
    attention_with_weights(q, k, v, opts).map(|(out, _)| out)
}

/// Like [`attention`] but also returns the attention weights (masked entries are 0).
pub fn attention_with_weights(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    opts: AttentionOpts,
) -> Result<(Matrix, Matrix), NumError> {
    check_shapes(q, k, v)?;
    let n_keys = k.rows();
    let scale = opts.scale(q.cols());
    let mut weights = gemm(q, false, k, true);
    for i in 0..weights.rows() {
        let visible = opts.visible(i, n_keys);
        let row = weights.row_mut(i);
        let abs_i = opts.query_offset + i;
        for (j, s) in row[..visible].iter_mut().enumerate() {
            *s *= scale;
            if opts.recency_slope != 0.0 {
                *s -= opts.recency_slope * abs_i.saturating_sub(j) as f64;
            }
        }
        softmax_in_place(&mut row[..visible]);
        row[visible..].iter_mut().for_each(|s| *s = 0.0);
    }
    let out = gemm(&weights, false, v, false);
    Ok((out, weights))
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`, given the
/// weights returned by [`attention_with_weights`].
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &Matrix,
    grad_out: &Matrix,
    opts: AttentionOpts,
) -> Result<(Matrix, Matrix, Matrix), NumError> {
    check_shapes(q, k, v)?;
    if grad_out.shape() != (q.rows(), v.cols()) {
        return Err(NumError::shape("attention grad", grad_out.shape(), (q.rows(), v.cols())));
    }
    let scale = opts.scale(q.cols());
    let grad_v = gemm(weights, true, grad_out, false);
    let mut grad_scores = gemm(grad_out, false, v, true);
    for i in 0..grad_scores.rows() {
        let p = weights.row(i);
        let ds = grad_scores.row_mut(i);
        let dot: f64 = p.iter().zip(ds.iter()).map(|(a, b)| a * b).sum();
        for (d, &pw) in ds.iter_mut().zip(p) {
            *d = pw * (*d - dot) * scale;
        }
    }
    let grad_q = gemm(&grad_scores, false, k, false);
    let grad_k = gemm(&grad_scores, true, q, false);
    Ok((grad_q, grad_k, grad_v))
}
