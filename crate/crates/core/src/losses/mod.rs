//! Training objectives: the factual regression loss, the representation
//! balancing losses, and their weighted combination.

mod eb;
mod ipm;

#[cfg(test)]
#[path = "../../tests/support/eb_oracle.rs"]
mod eb_oracle;

pub use eb::{
    eb_dual_solve, eb_representation_loss, eb_weights, EBDualState, EbSolverConfig,
};
pub use ipm::{
    default_epsilon, mmd_squared, mmd_squared_rbf, pairwise_ipm, pairwise_sq_distances, pairwise_wasserstein_with,
    wasserstein, Ipm, IpmOutcome, DEFAULT_SINKHORN_ITERS,
};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Rows of a minibatch representation split by treatment.
#[derive(Debug, Clone)]
pub struct GroupedRepresentations<'t> {
    groups: Vec<Option<Var<'t>>>,
    indices: Vec<Vec<usize>>,
}

impl<'t> GroupedRepresentations<'t> {
    /// Splits `reps` (`[batch, d]`) by 0-based treatment.
    pub fn new(reps: Var<'t>, treatments: &[usize], k: usize) -> Result<Self> {
        if reps.shape().len() != 2 || reps.shape()[0] != treatments.len() {
            return Err(Error::Shape {
                op: "group",
                lhs: reps.shape(),
                rhs: vec![treatments.len()],
            });
        }
        let mut indices = vec![Vec::new(); k];
        for (i, &t) in treatments.iter().enumerate() {
            if t >= k {
                return Err(Error::Treatment { id: t + 1, k });
            }
            indices[t].push(i);
        }
        let groups = indices
            .iter()
            .map(|idx| {
                if idx.is_empty() {
                    Ok(None)
                } else {
                    reps.index_select(idx).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { groups, indices })
    }

    /// Groups given directly; `None` marks an empty group.
    pub fn from_groups(groups: Vec<Option<Var<'t>>>) -> Result<Self> {
        let mut d = None;
        let mut offset = 0;
        let mut indices = Vec::with_capacity(groups.len());
        for g in groups.iter() {
            let n = match g {
                Some(v) => {
                    let s = v.shape();
                    if s.len() != 2 || s[0] == 0 || d.is_some_and(|d| d != s[1]) {
                        return Err(Error::Shape {
                            op: "group",
                            lhs: vec![0, d.unwrap_or(0)],
                            rhs: s,
                        });
                    }
                    d = Some(s[1]);
                    s[0]
                }
                None => 0,
            };
            indices.push((offset..offset + n).collect());
            offset += n;
        }
        Ok(Self { groups, indices })
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, t: usize) -> Option<Var<'t>> {
        self.groups.get(t).copied().flatten()
    }

    pub fn size(&self, t: usize) -> usize {
        self.indices[t].len()
    }

    /// Minibatch positions of the rows in group `t`.
    pub fn indices(&self, t: usize) -> &[usize] {
        &self.indices[t]
    }

    pub fn non_empty(&self) -> usize {
        self.groups.iter().filter(|g| g.is_some()).count()
    }

    pub fn has_empty(&self) -> bool {
        self.non_empty() < self.k()
    }

    /// Detached group values.
    pub fn values(&self) -> Vec<Option<Tensor>> {
        self.groups
            .iter()
            .map(|g| g.map(|v| (*v.value()).clone()))
            .collect()
    }
}

/// `(1/B) sum_i (pred[i, t_i] - y_i)^2` with 0-based treatments.
pub fn factual_mse<'t>(pred: Var<'t>, treatments: &[usize], y: &[f64]) -> Result<Var<'t>> {
    let shape = pred.shape();
    let (b, k) = match shape.as_slice() {
        [b, k] => (*b, *k),
        _ => return Err(Error::Shape { op: "factual_mse", lhs: shape, rhs: vec![] }),
    };
    if treatments.len() != b || y.len() != b || b == 0 {
        return Err(Error::Shape {
            op: "factual_mse",
            lhs: vec![b, k],
            rhs: vec![treatments.len(), y.len()],
        });
    }
    let mut idx = Vec::with_capacity(b);
    for (r, &t) in treatments.iter().enumerate() {
        if t >= k {
            return Err(Error::Treatment { id: t + 1, k });
        }
        idx.push(r * k + t);
    }
    let tape = pred.tape();
    let observed = tape.constant(Tensor::vector(y.to_vec())?);
    pred.reshape(&[b * k])?
        .index_select(&idx)?
        .sub(&observed)?
        .square()?
        .mean()
}

/// `alpha * l1 + beta * l2`.
pub fn total_loss<'t>(l1: Var<'t>, l2: Var<'t>, alpha: f64, beta: f64) -> Result<Var<'t>> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::invalid(format!(
            "loss weights must be non-negative (alpha {alpha}, beta {beta})"
        )));
    }
    l1.scale(alpha)?.add(&l2.scale(beta)?)
}
