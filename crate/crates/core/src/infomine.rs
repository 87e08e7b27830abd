//! Residual cross-attention fusion of a main and an auxiliary feature stream:
//! `T = MLP(X_main + softmax(φq(X_main) · φk(X_aux)ᵀ) · φv(X_aux))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::rng::Rng;
use crate::numcore::{
    attention_backward, attention_with_weights, join, params, params_mut, AttentionOpts, FeedForward,
    FeedForwardTape, Linear, LinearTape, Mask, Matrix, NumError, Params,
};
use crate::speechlm::ParamGroup;
use crate::trainer::{Optimizer, OptimizerKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("feature shapes differ: main {main:?}, aux {aux:?}, expected width {dim}")]
    Shape { main: (usize, usize), aux: (usize, usize), dim: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub main: Matrix,
    pub aux: Matrix,
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub phi_q: Linear,
    pub phi_k: Linear,
    pub phi_v: Linear,
    pub mlp: FeedForward,
    /// Divide scores by `sqrt(dim)`; off gives the plain dot product.
    pub scaled: bool,
}

#[derive(Debug, Clone)]
pub struct FusionTape {
    q: (Matrix, LinearTape),
    k: (Matrix, LinearTape),
    v: (Matrix, LinearTape),
    weights: Matrix,
    mlp: FeedForwardTape,
}

impl FusionParams {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        Self {
            phi_q: Linear::new(dim, dim, rng),
            phi_k: Linear::new(dim, dim, rng),
            phi_v: Linear::new(dim, dim, rng),
            mlp: FeedForward::new(dim, 4 * dim, rng),
            scaled: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_q.in_dim()
    }

    fn opts(&self) -> AttentionOpts {
        AttentionOpts::new(Mask::None, self.scaled)
    }

    fn check(&self, pair: &FeaturePair) -> Result<(), FusionError> {
        let dim = self.dim();
        if pair.main.shape() != pair.aux.shape() || pair.main.cols() != dim {
            return Err(FusionError::Shape { main: pair.main.shape(), aux: pair.aux.shape(), dim });
        }
        Ok(())
    }

    pub fn forward(&self, pair: &FeaturePair) -> Result<(Matrix, FusionTape), FusionError> {
        self.check(pair)?;
        let q = self.phi_q.forward(&pair.main)?;
        let k = self.phi_k.forward(&pair.aux)?;
        let v = self.phi_v.forward(&pair.aux)?;
        let (mined, weights) = attention_with_weights(&q.0, &k.0, &v.0, self.opts())?;
        let (out, mlp) = self.mlp.forward(&pair.main.add(&mined)?)?;
        Ok((out, FusionTape { q, k, v, weights, mlp }))
    }

    /// Gradients with respect to both inputs and every parameter.
    pub fn backward(&self, tape: &FusionTape, grad_out: &Matrix) -> Result<(FeaturePair, FusionParams), FusionError> {
        let (d_sum, g_mlp) = self.mlp.backward(&tape.mlp, grad_out)?;
        let (dq, dk, dv) = attention_backward(&tape.q.0, &tape.k.0, &tape.v.0, &tape.weights, &d_sum, self.opts())?;
        let (d_main_q, g_q) = self.phi_q.backward(&tape.q.1, &dq)?;
        let (d_aux_k, g_k) = self.phi_k.backward(&tape.k.1, &dk)?;
        let (d_aux_v, g_v) = self.phi_v.backward(&tape.v.1, &dv)?;
        let grads = FusionParams { phi_q: g_q, phi_k: g_k, phi_v: g_v, mlp: g_mlp, scaled: self.scaled };
        Ok((FeaturePair { main: d_sum.add(&d_main_q)?, aux: d_aux_k.add(&d_aux_v)? }, grads))
    }
}

impl Params for FusionParams {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Matrix>) {
        self.phi_q.collect(out);
        self.phi_k.collect(out);
        self.phi_v.collect(out);
        self.mlp.collect(out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.phi_q.collect_mut(out);
        self.phi_k.collect_mut(out);
        self.phi_v.collect_mut(out);
        self.mlp.collect_mut(out);
    }
    fn names(&self, prefix: &str, out: &mut Vec<String>) {
        self.phi_q.names(&join(prefix, "phi_q"), out);
        self.phi_k.names(&join(prefix, "phi_k"), out);
        self.phi_v.names(&join(prefix, "phi_v"), out);
        self.mlp.names(&join(prefix, "mlp"), out);
    }
}

/// Enhanced tokens for `pair`, one row per main row.
pub fn info_mine(pair: &FeaturePair, fusion: &FusionParams) -> Result<Matrix, FusionError> {
    fusion.forward(pair).map(|(out, _)| out)
}

/// Toy retrieval: both streams are random projections of the same latent
/// rows, the auxiliary one row-shuffled and less noisy. The target is the
/// latent row behind each main row, so the auxiliary stream only helps when
/// fusion finds the matching row by content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub rows: usize,
    pub dim: usize,
    pub main_noise: f64,
    pub aux_noise: f64,
}

impl Default for RetrievalTask {
    fn default() -> Self {
        Self { rows: 4, dim: 8, main_noise: 1.5, aux_noise: 0.1 }
    }
}

/// Fixed encoder projections for a [`RetrievalTask`].
#[derive(Debug, Clone)]
pub struct SyntheticEncoders {
    main: Matrix,
    aux: Matrix,
}

impl SyntheticEncoders {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        Self { main: rng.normal_matrix(dim, dim, s), aux: rng.normal_matrix(dim, dim, s) }
    }
}

impl RetrievalTask {
    /// One example: the feature pair and the latent target for each main row.
    /// With `related == false` the auxiliary stream encodes unrelated latents.
    pub fn sample(&self, enc: &SyntheticEncoders, related: bool, rng: &mut Rng) -> (FeaturePair, Matrix) {
        let latent = rng.normal_matrix(self.rows, self.dim, 1.0);
        let mut order: Vec<usize> = (0..self.rows).collect();
        rng.shuffle(&mut order);
        let source = if related { latent.clone() } else { rng.normal_matrix(self.rows, self.dim, 1.0) };
        let mut shuffled = Matrix::zeros(self.rows, self.dim);
        for (r, &o) in order.iter().enumerate() {
            shuffled.row_mut(r).copy_from_slice(source.row(o));
        }
        let mut main = latent.matmul(&enc.main).expect("square projection");
        main.add_assign(&rng.normal_matrix(self.rows, self.dim, self.main_noise));
        let mut aux = shuffled.matmul(&enc.aux).expect("square projection");
        aux.add_assign(&rng.normal_matrix(self.rows, self.dim, self.aux_noise));
        (FeaturePair { main, aux }, latent)
    }
}

/// Half mean squared error and its gradient.
pub fn mse(out: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let n = out.data().len() as f64;
    let mut grad = out.clone();
    grad.add_scaled(target, -1.0);
    let loss = grad.data().iter().map(|d| d * d).sum::<f64>() / (2.0 * n);
    grad.scale(1.0 / n);
    (loss, grad)
}

/// Mean loss over `samples` fresh examples drawn from `seed`.
pub fn evaluate(
    fusion: &FusionParams,
    task: &RetrievalTask,
    enc: &SyntheticEncoders,
    related: bool,
    samples: usize,
    seed: u64,
) -> Result<f64, FusionError> {
    let mut rng = Rng::seed(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let (pair, target) = task.sample(enc, related, &mut rng);
        total += mse(&info_mine(&pair, fusion)?, &target).0;
    }
    Ok(total / samples.max(1) as f64)
}

/// Adam on fresh examples, one per step. Returns the per-step losses.
pub fn train_retrieval(
    fusion: &mut FusionParams,
    task: &RetrievalTask,
    enc: &SyntheticEncoders,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, FusionError> {
    let mut rng = Rng::seed(seed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), &params(fusion));
    let groups = vec![ParamGroup::Adapter; params(fusion).len()];
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (pair, target) = task.sample(enc, true, &mut rng);
        let (out, tape) = fusion.forward(&pair)?;
        let (loss, grad) = mse(&out, &target);
        let (_, grads) = fusion.backward(&tape, &grad)?;
        opt.step(params_mut(fusion), &params(&grads), &groups, |_| Some(lr));
        losses.push(loss);
    }
    Ok(losses)
}
