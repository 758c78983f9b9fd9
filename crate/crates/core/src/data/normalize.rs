use super::ObservationalDataset;
use crate::autodiff::Tensor;
use crate::checkpoint::Document;
use crate::error::{Error, Result};

/// Standard deviations below this are treated as constant columns.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// Per-column affine maps fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    /// Covariate statistics from `train`; outcome statistics too when
    /// `standardize_outcome`, otherwise the identity on outcomes.
    pub fn fit(train: &ObservationalDataset, standardize_outcome: bool) -> Result<Self> {
        if train.n() == 0 {
            return Err(Error::invalid("cannot fit a scaler on an empty dataset"));
        }
        let mut x_mean = Vec::with_capacity(train.n0());
        let mut x_std = Vec::with_capacity(train.n0());
        for c in 0..train.n0() {
            let (m, s) = moments(train.x.column(c).into_iter());
            if s < ZERO_VARIANCE {
                log::warn!("covariate x{c} is constant in the training data; left unscaled");
                x_mean.push(0.0);
                x_std.push(1.0);
            } else {
                x_mean.push(m);
                x_std.push(s);
            }
        }
        let (y_mean, y_std) = if standardize_outcome {
            let (m, s) = moments(train.y.iter().cloned());
            if s < ZERO_VARIANCE {
                log::warn!("outcome is constant in the training data; left unscaled");
                (0.0, 1.0)
            } else {
                (m, s)
            }
        } else {
            (0.0, 1.0)
        };
        Ok(Self { x_mean, x_std, y_mean, y_std })
    }

    pub fn transform_x(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.x_mean.len();
        if x.cols() != w {
            return Err(Error::Shape { op: "standardize", lhs: vec![x.rows(), w], rhs: x.shape().to_vec() });
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.x_mean[i % w]) / self.x_std[i % w])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn transform_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn inverse_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }

    /// Applies the outcome inverse to every entry.
    pub fn inverse_outcomes(&self, t: &Tensor) -> Tensor {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| self.inverse_y(v)).collect())
            .expect("affine image of finite values")
    }

    pub fn apply(&self, ds: &ObservationalDataset) -> Result<ObservationalDataset> {
        let mu = ds
            .mu
            .as_ref()
            .map(|m| Tensor::new(m.shape().to_vec(), m.data().iter().map(|&v| self.transform_y(v)).collect()))
            .transpose()?;
        Ok(ObservationalDataset {
            x: self.transform_x(&ds.x)?,
            t: ds.t.clone(),
            y: ds.y.iter().map(|&v| self.transform_y(v)).collect(),
            mu,
            k: ds.k(),
        })
    }

    /// Checkpoint entries under `scaler.*`.
    pub fn to_document(&self) -> Document {
        let mut d = Document::new();
        d.insert("scaler.x_mean".into(), self.x_mean.clone());
        d.insert("scaler.x_std".into(), self.x_std.clone());
        d.insert("scaler.y".into(), vec![self.y_mean, self.y_std]);
        d
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let get = |k: &str| doc.get(k).ok_or_else(|| Error::Schema(format!("checkpoint is missing `{k}`")));
        let (x_mean, x_std, y) = (get("scaler.x_mean")?, get("scaler.x_std")?, get("scaler.y")?);
        if x_mean.len() != x_std.len() || y.len() != 2 || x_std.iter().chain(&y[1..]).any(|&s| s <= 0.0) {
            return Err(Error::Schema("malformed scaler entries".into()));
        }
        Ok(Self { x_mean: x_mean.clone(), x_std: x_std.clone(), y_mean: y[0], y_std: y[1] })
    }
}

/// Fits on `train` and applies the same map to `train` and every other
/// dataset.
pub fn normalize(
    train: &ObservationalDataset,
    others: &[&ObservationalDataset],
    standardize_outcome: bool,
) -> Result<(Standardizer, ObservationalDataset, Vec<ObservationalDataset>)> {
    let s = Standardizer::fit(train, standardize_outcome)?;
    let tr = s.apply(train)?;
    let rest = others.iter().map(|d| s.apply(d)).collect::<Result<_>>()?;
    Ok((s, tr, rest))
}
