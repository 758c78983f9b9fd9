//! Observational datasets: schema, CSV ingestion, splits, normalisation
//! and a synthetic generator with known potential outcomes.
//!
//! Treatments are 1-based in files and in the public API that takes ids,
//! and 0-based inside [`ObservationalDataset::t`].

mod csv_io;
mod normalize;
mod split;
mod synthetic;

pub use csv_io::{load_csv, write_csv};
pub use normalize::{normalize, Standardizer, ZERO_VARIANCE};
pub use split::{split, split_indices, SplitIndices, SplitSpec};
pub use synthetic::{
    generate_synthetic, generate_with_propensities, meta_path, outcome_function, population_ate, write_meta,
    GeneratorConfig, SyntheticData,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Rows `(x_i, t_i, y_i)` with optional noiseless potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalDataset {
    /// Covariates `[N, n0]`.
    pub x: Tensor,
    /// 0-based treatment per row.
    pub t: Vec<usize>,
    /// Observed outcome per row.
    pub y: Vec<f64>,
    /// Potential outcomes `[N, K]` when known.
    pub mu: Option<Tensor>,
    k: usize,
}

impl ObservationalDataset {
    /// Validates shapes, treatment range, and that every treatment occurs.
    pub fn new(x: Tensor, t: Vec<usize>, y: Vec<f64>, mu: Option<Tensor>, k: usize) -> Result<Self> {
        let ds = Self::unchecked(x, t, y, mu, k)?;
        if let Some(missing) = (0..k).find(|tr| !ds.t.contains(tr)) {
            return Err(Error::Schema(format!("treatment {} never occurs", missing + 1)));
        }
        Ok(ds)
    }

    /// Shape checks only; a subset may miss treatments.
    fn unchecked(x: Tensor, t: Vec<usize>, y: Vec<f64>, mu: Option<Tensor>, k: usize) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::Schema(format!("covariates must be a matrix, got shape {:?}", x.shape())));
        }
        let n = x.rows();
        if t.len() != n || y.len() != n {
            return Err(Error::Schema(format!(
                "{n} covariate rows but {} treatments and {} outcomes",
                t.len(),
                y.len()
            )));
        }
        if k < 2 {
            return Err(Error::Schema(format!("need at least two treatments, found {k}")));
        }
        if let Some(&bad) = t.iter().find(|&&v| v >= k) {
            return Err(Error::Treatment { id: bad + 1, k });
        }
        if let Some(m) = &mu {
            if m.shape() != [n, k] {
                return Err(Error::Schema(format!("potential outcomes have shape {:?}, expected [{n}, {k}]", m.shape())));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("outcomes must be finite".into()));
        }
        Ok(Self { x, t, y, mu, k })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn n0(&self) -> usize {
        self.x.cols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Row count per treatment.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &t in &self.t {
            sizes[t] += 1;
        }
        sizes
    }

    /// Rows at `indices`, in that order. Treatments may go missing.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            mu: self.mu.as_ref().map(|m| m.select_rows(indices)),
            k: self.k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let x = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(ObservationalDataset::new(x.clone(), vec![0, 1, 0], vec![0.0; 3], None, 2).is_ok());
        assert!(matches!(
            ObservationalDataset::new(x.clone(), vec![0, 0, 0], vec![0.0; 3], None, 2),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            ObservationalDataset::new(x.clone(), vec![0, 2, 1], vec![0.0; 3], None, 2),
            Err(Error::Treatment { id: 3, k: 2 })
        ));
        assert!(ObservationalDataset::new(x, vec![0, 1], vec![0.0; 3], None, 2).is_err());
    }
}
