use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 1e-2,
            OptimizerKind::Adam => 1e-3,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        }
    }
}

/// First-order optimiser over a fixed list of parameter buffers.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    /// `sizes` are the lengths of the parameter buffers, in update order.
    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            },
        }
    }

    /// Applies one update: `p -= lr * g` for SGD, bias-corrected Adam
    /// otherwise.
    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>]) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= *lr * gi;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, step, m, v } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), mb), vb) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for i in 0..p.len() {
                        let gi = g[i];
                        mb[i] = *beta1 * mb[i] + (1.0 - *beta1) * gi;
                        vb[i] = *beta2 * vb[i] + (1.0 - *beta2) * gi * gi;
                        let mhat = mb[i] / c1;
                        let vhat = vb[i] / c2;
                        p[i] -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
    }
}
