use super::matrix::{gemm, Matrix};
use super::ops::{attention_backward, attention_with_weights, gelu, gelu_grad, layer_norm_rows, AttentionOpts, Mask};
use super::rng::Rng;
use super::{join, next_stamp, NumError, Params};

const INIT_STD: f64 = 0.02;

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Matrix,
    bias: Matrix,
    stamp: u64,
}

#[derive(Debug, Clone)]
pub struct LinearTape {
    input: Matrix,
    stamp: u64,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            weight: rng.truncated_normal_matrix(in_dim, out_dim, INIT_STD),
            bias: Matrix::zeros(1, out_dim),
            stamp: next_stamp(),
        }
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Result<Self, NumError> {
        if bias.shape() != (1, weight.cols()) {
            return Err(NumError::shape("linear bias", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias, stamp: next_stamp() })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn check_input(&self, x: &Matrix) -> Result<(), NumError> {
        if x.cols() != self.in_dim() {
            return Err(NumError::shape("linear", x.shape(), self.weight.shape()));
        }
        Ok(())
    }

    /// Forward without recording a tape.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, NumError> {
        self.check_input(x)?;
        let mut y = gemm(x, false, &self.weight, false);
        y.add_row_broadcast(&self.bias);
        Ok(y)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LinearTape), NumError> {
        let y = self.apply(x)?;
        Ok((y, LinearTape { input: x.clone(), stamp: self.stamp }))
    }

    pub fn backward(&self, tape: &LinearTape, grad_out: &Matrix) -> Result<(Matrix, Linear), NumError> {
        if tape.stamp != self.stamp {
            return Err(NumError::StaleTape { layer: "linear" });
        }
        if grad_out.shape() != (tape.input.rows(), self.out_dim()) {
            return Err(NumError::shape("linear grad", grad_out.shape(), (tape.input.rows(), self.out_dim())));
        }
        let grads = Linear {
            weight: gemm(&tape.input, true, grad_out, false),
            bias: grad_out.sum_rows(),
            stamp: 0,
        };
        let grad_in = gemm(grad_out, false, &self.weight, true);
        Ok((grad_in, grads))
    }
}

impl LinearTape {
    pub fn input(&self) -> &Matrix {
        &self.input
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Matrix>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.stamp = next_stamp();
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
    fn names(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(join(prefix, "weight"));
        out.push(join(prefix, "bias"));
    }
}

/// Per-row layer normalisation with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Matrix,
    beta: Matrix,
    eps: f64,
    stamp: u64,
}

#[derive(Debug, Clone)]
pub struct LayerNormTape {
    input: Matrix,
    normalized: Matrix,
    rstd: Vec<f64>,
    stamp: u64,
}

impl LayerNormTape {
    pub fn input(&self) -> &Matrix {
        &self.input
    }
    pub fn rstd(&self) -> &[f64] {
        &self.rstd
    }
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-10;

    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, 1.0),
            beta: Matrix::zeros(1, dim),
            eps: Self::DEFAULT_EPS,
            stamp: next_stamp(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.cols()
    }

    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    pub fn beta(&self) -> &Matrix {
        &self.beta
    }

    fn affine(&self, normalized: &Matrix) -> Matrix {
        let mut y = normalized.clone();
        let (g, b) = (self.gamma.data(), self.beta.data());
        for r in 0..y.rows() {
            for ((v, gi), bi) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        y
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix, NumError> {
        if x.cols() != self.dim() {
            return Err(NumError::shape("layer_norm", x.shape(), self.gamma.shape()));
        }
        Ok(self.affine(&layer_norm_rows(x, self.eps).0))
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LayerNormTape), NumError> {
        if x.cols() != self.dim() {
            return Err(NumError::shape("layer_norm", x.shape(), self.gamma.shape()));
        }
        let (normalized, rstd) = layer_norm_rows(x, self.eps);
        let y = self.affine(&normalized);
        Ok((y, LayerNormTape { input: x.clone(), normalized, rstd, stamp: self.stamp }))
    }

    pub fn backward(&self, tape: &LayerNormTape, grad_out: &Matrix) -> Result<(Matrix, LayerNorm), NumError> {
        if tape.stamp != self.stamp {
            return Err(NumError::StaleTape { layer: "layer_norm" });
        }
        if grad_out.shape() != tape.input.shape() {
            return Err(NumError::shape("layer_norm grad", grad_out.shape(), tape.input.shape()));
        }
        let n = self.dim() as f64;
        let mut d_gamma = Matrix::zeros(1, self.dim());
        let mut d_beta = Matrix::zeros(1, self.dim());
        let mut grad_in = Matrix::zeros(grad_out.rows(), grad_out.cols());
        let g = self.gamma.data();
        for r in 0..grad_out.rows() {
            let dy = grad_out.row(r);
            let xhat = tape.normalized.row(r);
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for c in 0..dy.len() {
                d_gamma.data_mut()[c] += dy[c] * xhat[c];
                d_beta.data_mut()[c] += dy[c];
                let dxhat = dy[c] * g[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat[c];
            }
            let scale = tape.rstd[r] / n;
            let out = grad_in.row_mut(r);
            for c in 0..dy.len() {
                let dxhat = dy[c] * g[c];
                out[c] = scale * (n * dxhat - sum_dxhat - xhat[c] * sum_dxhat_xhat);
            }
        }
        Ok((grad_in, LayerNorm { gamma: d_gamma, beta: d_beta, eps: self.eps, stamp: 0 }))
    }
}

impl Params for LayerNorm {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Matrix>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.stamp = next_stamp();
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
    fn names(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(join(prefix, "gamma"));
        out.push(join(prefix, "beta"));
    }
}

/// Multi-head self-attention with output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    n_heads: usize,
    causal: bool,
    scaled: bool,
    slopes: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadTape {
    q_tape: LinearTape,
    k_tape: LinearTape,
    v_tape: LinearTape,
    o_tape: LinearTape,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<Matrix>,
}

impl MultiHeadTape {
    /// Attention weights of head `h` (`T × T`).
    pub fn weights(&self, h: usize) -> &Matrix {
        &self.weights[h]
    }
}

/// Cached keys and values for incremental decoding through one attention layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    k: Matrix,
    v: Matrix,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.k.rows()
    }
    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }
}

impl MultiHeadAttention {
    /// `recency` adds a fixed per-head linear distance penalty with slopes
    /// `2^(-8(h+1)/H)`.
    pub fn new(dim: usize, n_heads: usize, causal: bool, scaled: bool, recency: bool, rng: &mut Rng) -> Self {
        assert!(n_heads > 0 && dim % n_heads == 0, "dim must divide into heads");
        let slopes = if recency {
            (0..n_heads).map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / n_heads as f64)).collect()
        } else {
            vec![0.0; n_heads]
        };
        Self {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
            n_heads,
            causal,
            scaled,
            slopes,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn opts(&self, head: usize, query_offset: usize) -> AttentionOpts {
        AttentionOpts {
            mask: if self.causal { Mask::Causal } else { Mask::None },
            scaled: self.scaled,
            recency_slope: self.slopes[head],
            query_offset,
        }
    }

    fn head_dim(&self) -> usize {
        self.q.out_dim() / self.n_heads
    }

    fn attend(&self, q: &Matrix, k: &Matrix, v: &Matrix, query_offset: usize) -> (Matrix, Vec<Matrix>) {
        let hd = self.head_dim();
        let mut concat = Matrix::zeros(q.rows(), q.cols());
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let (out, w) = attention_with_weights(
                &q.slice_cols(a, b),
                &k.slice_cols(a, b),
                &v.slice_cols(a, b),
                self.opts(h, query_offset),
            )
            .expect("head slices share shapes");
            concat.set_cols(a, &out);
            weights.push(w);
        }
        (concat, weights)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MultiHeadTape), NumError> {
        let (q, q_tape) = self.q.forward(x)?;
        let (k, k_tape) = self.k.forward(x)?;
        let (v, v_tape) = self.v.forward(x)?;
        let (concat, weights) = self.attend(&q, &k, &v, 0);
        let (y, o_tape) = self.o.forward(&concat)?;
        Ok((y, MultiHeadTape { q_tape, k_tape, v_tape, o_tape, q, k, v, weights }))
    }

    /// Processes new rows `x` against everything already in `cache`, then
    /// appends their keys and values.
    pub fn forward_cached(&self, x: &Matrix, cache: &mut KvCache) -> Result<Matrix, NumError> {
        let offset = cache.len();
        let q = self.q.apply(x)?;
        let k = self.k.apply(x)?;
        let v = self.v.apply(x)?;
        for r in 0..x.rows() {
            cache.k.push_row(k.row(r));
            cache.v.push_row(v.row(r));
        }
        let (concat, _) = self.attend(&q, &cache.k, &cache.v, offset);
        self.o.apply(&concat)
    }

    pub fn backward(&self, tape: &MultiHeadTape, grad_out: &Matrix) -> Result<(Matrix, MultiHeadAttention), NumError> {
        let (d_concat, g_o) = self.o.backward(&tape.o_tape, grad_out)?;
        let hd = self.head_dim();
        let mut dq = Matrix::zeros(tape.q.rows(), tape.q.cols());
        let mut dk = dq.clone();
        let mut dv = dq.clone();
        for h in 0..self.n_heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let (gq, gk, gv) = attention_backward(
                &tape.q.slice_cols(a, b),
                &tape.k.slice_cols(a, b),
                &tape.v.slice_cols(a, b),
                &tape.weights[h],
                &d_concat.slice_cols(a, b),
                self.opts(h, 0),
            )?;
            dq.set_cols(a, &gq);
            dk.set_cols(a, &gk);
            dv.set_cols(a, &gv);
        }
        let (mut dx, g_q) = self.q.backward(&tape.q_tape, &dq)?;
        let (dx_k, g_k) = self.k.backward(&tape.k_tape, &dk)?;
        let (dx_v, g_v) = self.v.backward(&tape.v_tape, &dv)?;
        dx.add_assign(&dx_k);
        dx.add_assign(&dx_v);
        let grads = MultiHeadAttention {
            q: g_q,
            k: g_k,
            v: g_v,
            o: g_o,
            n_heads: self.n_heads,
            causal: self.causal,
            scaled: self.scaled,
            slopes: self.slopes.clone(),
        };
        Ok((dx, grads))
    }
}

impl Params for MultiHeadAttention {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Matrix>) {
        self.q.collect(out);
        self.k.collect(out);
        self.v.collect(out);
        self.o.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.q.collect_mut(out);
        self.k.collect_mut(out);
        self.v.collect_mut(out);
        self.o.collect_mut(out);
    }
    fn names(&self, prefix: &str, out: &mut Vec<String>) {
        self.q.names(&join(prefix, "q"), out);
        self.k.names(&join(prefix, "k"), out);
        self.v.names(&join(prefix, "v"), out);
        self.o.names(&join(prefix, "o"), out);
    }
}

/// Two linear maps with a GELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardTape {
    up: LinearTape,
    pre_act: Matrix,
    down: LinearTape,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self { up: Linear::new(dim, hidden, rng), down: Linear::new(hidden, dim, rng) }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix, NumError> {
        let h = self.up.apply(x)?.map(gelu);
        self.down.apply(&h)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, FeedForwardTape), NumError> {
        let (pre_act, up) = self.up.forward(x)?;
        let (y, down) = self.down.forward(&pre_act.map(gelu))?;
        Ok((y, FeedForwardTape { up, pre_act, down }))
    }

    pub fn backward(&self, tape: &FeedForwardTape, grad_out: &Matrix) -> Result<(Matrix, FeedForward), NumError> {
        let (mut dh, g_down) = self.down.backward(&tape.down, grad_out)?;
        for (d, &x) in dh.data_mut().iter_mut().zip(tape.pre_act.data()) {
            *d *= gelu_grad(x);
        }
        let (dx, g_up) = self.up.backward(&tape.up, &dh)?;
        Ok((dx, FeedForward { up: g_up, down: g_down }))
    }
}

impl Params for FeedForward {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Matrix>) {
        self.up.collect(out);
        self.down.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.up.collect_mut(out);
        self.down.collect_mut(out);
    }
    fn names(&self, prefix: &str, out: &mut Vec<String>) {
        self.up.names(&join(prefix, "up"), out);
        self.down.names(&join(prefix, "down"), out);
    }
}

/// Pre-norm transformer block:
/// `h = x + attn(ln1(x))`, `y = h + ffn(ln2(h))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BlockTape {
    input: Matrix,
    ln1: LayerNormTape,
    attn: MultiHeadTape,
    ln2: LayerNormTape,
    ffn: FeedForwardTape,
}

impl BlockTape {
    pub fn input(&self) -> &Matrix {
        &self.input
    }
    pub fn attention(&self) -> &MultiHeadTape {
        &self.attn
    }
}

impl TransformerBlock {
    /// Causal block with scaled attention and a 4x feed-forward expansion.
    pub fn new(dim: usize, n_heads: usize, recency: bool, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, n_heads, true, true, recency, rng),
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, 4 * dim, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, BlockTape), NumError> {
        let (n1, ln1) = self.ln1.forward(x)?;
        let (a, attn) = self.attn.forward(&n1)?;
        let h = x.add(&a)?;
        let (n2, ln2) = self.ln2.forward(&h)?;
        let (f, ffn) = self.ffn.forward(&n2)?;
        let y = h.add(&f)?;
        Ok((y, BlockTape { input: x.clone(), ln1, attn, ln2, ffn }))
    }

    pub fn forward_cached(&self, x: &Matrix, cache: &mut KvCache) -> Result<Matrix, NumError> {
        let a = self.attn.forward_cached(&self.ln1.apply(x)?, cache)?;
        let h = x.add(&a)?;
        let f = self.ffn.apply(&self.ln2.apply(&h)?)?;
        h.add(&f)
    }

    pub fn backward(&self, tape: &BlockTape, grad_out: &Matrix) -> Result<(Matrix, TransformerBlock), NumError> {
        let (d_n2, g_ffn) = self.ffn.backward(&tape.ffn, grad_out)?;
        let (d_h_ln, g_ln2) = self.ln2.backward(&tape.ln2, &d_n2)?;
        let mut d_h = grad_out.clone();
        d_h.add_assign(&d_h_ln);
        let (d_n1, g_attn) = self.attn.backward(&tape.attn, &d_h)?;
        let (d_x_ln, g_ln1) = self.ln1.backward(&tape.ln1, &d_n1)?;
        let mut d_x = d_h;
        d_x.add_assign(&d_x_ln);
        Ok((d_x, TransformerBlock { ln1: g_ln1, attn: g_attn, ln2: g_ln2, ffn: g_ffn }))
    }
}

impl Params for TransformerBlock {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Matrix>) {
        self.ln1.collect(out);
        self.attn.collect(out);
        self.ln2.collect(out);
        self.ffn.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.ln1.collect_mut(out);
        self.attn.collect_mut(out);
        self.ln2.collect_mut(out);
        self.ffn.collect_mut(out);
    }
    fn names(&self, prefix: &str, out: &mut Vec<String>) {
        self.ln1.names(&join(prefix, "ln1"), out);
        self.attn.names(&join(prefix, "attn"), out);
        self.ln2.names(&join(prefix, "ln2"), out);
        self.ffn.names(&join(prefix, "ffn"), out);
    }
}
