//! Dense numeric kernel: matrices, row-wise softmax, layer normalisation,
//! scaled dot-product attention, feed-forward blocks and hand-written
//! backward passes for every layer used by the toy models.
//!
//! Layers return a tape from `forward`; `backward` consumes that tape and
//! returns the input gradient plus a gradient container shaped exactly like
//! the layer (`Linear` gradients are a `Linear`, and so on). Gradient
//! containers are combined through the [`Params`] visitor.

mod layers;
mod matrix;
mod ops;
pub mod gradcheck;
pub mod rng;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub use layers::{
    BlockTape, FeedForward, FeedForwardTape, KvCache, LayerNorm, LayerNormTape, Linear, LinearTape,
    MultiHeadAttention, MultiHeadTape, TransformerBlock,
};
pub use matrix::Matrix;
pub use ops::{
    attention, attention_backward, attention_with_weights, gelu, gelu_grad, layer_norm_rows,
    softmax_rows, AttentionOpts, Mask,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("data length {len} does not fit a {rows}x{cols} matrix")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("stale tape for {layer}: parameters changed after the forward pass")]
    StaleTape { layer: &'static str },
}

impl NumError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        NumError::Shape { op, left, right }
    }
}

static STAMP: AtomicU64 = AtomicU64::new(1);

/// Fresh identifier for a parameter state; tapes remember the stamp they were
/// recorded under so a backward pass against mutated weights is rejected.
pub(crate) fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Access to the parameter matrices of a layer or model.
///
/// `collect`, `collect_mut` and `names` must agree on order. A mutable
/// collection invalidates any tape recorded against the previous values.
pub trait Params {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Matrix>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>);
    fn names(&self, prefix: &str, out: &mut Vec<String>);
}

pub fn params<P: Params + ?Sized>(p: &P) -> Vec<&Matrix> {
    let mut out = Vec::new();
    p.collect(&mut out);
    out
}

pub fn params_mut<P: Params + ?Sized>(p: &mut P) -> Vec<&mut Matrix> {
    let mut out = Vec::new();
    p.collect_mut(&mut out);
    out
}

pub fn param_names<P: Params + ?Sized>(p: &P) -> Vec<String> {
    let mut out = Vec::new();
    p.names("", &mut out);
    out
}

pub fn param_count<P: Params + ?Sized>(p: &P) -> usize {
    params(p).iter().map(|m| m.data().len()).sum()
}

/// Same structure as `p`, every entry zero.
pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut out = p.clone();
    params_mut(&mut out).into_iter().for_each(|m| m.fill(0.0));
    out
}

/// `dst += scale * src`, matched entry by entry.
pub fn accumulate<P: Params + ?Sized>(dst: &mut P, src: &P, scale: f64) {
    for (d, s) in params_mut(dst).into_iter().zip(params(src)) {
        d.add_scaled(s, scale);
    }
}

/// All parameters concatenated in declared order.
pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(p));
    for m in params(p) {
        out.extend_from_slice(m.data());
    }
    out
}

/// Inverse of [`flatten`]; `values` must hold exactly `param_count(p)` entries.
pub fn load_flat<P: Params + ?Sized>(p: &mut P, values: &[f64]) -> Result<(), NumError> {
    let expected = param_count(p);
    if values.len() != expected {
        return Err(NumError::DataLength { rows: 1, cols: expected, len: values.len() });
    }
    let mut offset = 0;
    for m in params_mut(p) {
        let n = m.data().len();
        m.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
