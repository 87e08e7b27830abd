use serde::{Deserialize, Serialize};

use crate::numcore::Matrix;
use crate::speechlm::ParamGroup;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter optimizer state, aligned with `Params::collect` order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[&Matrix]) -> Self {
        let zeros = || shapes.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect::<Vec<_>>();
        let second = if matches!(kind, OptimizerKind::Adam { .. }) { zeros() } else { Vec::new() };
        Self { kind, first: zeros(), second, t: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update. Matrices whose group has no learning rate are skipped
    /// and their state is left untouched.
    pub fn step(
        &mut self,
        params: Vec<&mut Matrix>,
        grads: &[&Matrix],
        groups: &[ParamGroup],
        lr: impl Fn(ParamGroup) -> Option<f64>,
    ) {
        self.t += 1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(lr) = lr(groups[i]) else { continue };
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = &mut self.first[i];
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((pv, mv), vv), gv) in
                        p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
