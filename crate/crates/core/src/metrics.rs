//! Treatment-effect estimands and their error metrics.
//!
//! All functions take 1-based treatment ids. Pairs are enumerated as
//! `(a, b)` with `a > b`: `(2,1), (3,1), (3,2), ...`.

use serde_json::{Map, Value};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Unordered treatment pairs `(a, b)`, `a > b`, 1-based.
pub fn treatment_pairs(k: usize) -> Vec<(usize, usize)> {
    (1..=k).flat_map(|a| (1..a).map(move |b| (a, b))).collect()
}

fn check_id(id: usize, k: usize) -> Result<usize> {
    if id == 0 || id > k {
        Err(Error::Treatment { id, k })
    } else {
        Ok(id - 1)
    }
}

/// `mu[:, a] - mu[:, b]`.
pub fn true_ite(mu: &Tensor, a: usize, b: usize) -> Result<Vec<f64>> {
    let k = mu.cols();
    let (ia, ib) = (check_id(a, k)?, check_id(b, k)?);
    Ok((0..mu.rows()).map(|r| mu.get(r, ia) - mu.get(r, ib)).collect())
}

fn check_pairs(tau_hat: &[Vec<f64>], tau: &[Vec<f64>], k: usize) -> Result<usize> {
    let expected = k * k.saturating_sub(1) / 2;
    if expected == 0 || tau_hat.len() != expected || tau.len() != expected {
        return Err(Error::invalid(format!(
            "expected {expected} treatment pairs, got {} estimated and {} true",
            tau_hat.len(),
            tau.len()
        )));
    }
    let n = tau[0].len();
    if n == 0 || tau_hat.iter().chain(tau).any(|v| v.len() != n) {
        return Err(Error::invalid("per-pair effect vectors must share one non-zero length"));
    }
    Ok(n)
}

fn pair_pehe(hat: &[f64], truth: &[f64]) -> f64 {
    hat.iter().zip(truth).map(|(h, t)| (h - t).powi(2)).sum::<f64>() / hat.len() as f64
}

fn pair_ate_error(hat: &[f64], truth: &[f64]) -> f64 {
    let n = hat.len() as f64;
    (hat.iter().sum::<f64>() / n - truth.iter().sum::<f64>() / n).abs()
}

/// Mean over pairs of the mean squared ITE error.
pub fn epsilon_pehe(tau_hat: &[Vec<f64>], tau: &[Vec<f64>], k: usize) -> Result<f64> {
    let pairs = check_pairs(tau_hat, tau, k).map(|_| tau.len())?;
    Ok(tau_hat.iter().zip(tau).map(|(h, t)| pair_pehe(h, t)).sum::<f64>() / pairs as f64)
}

/// Mean over pairs of the absolute ATE error.
pub fn epsilon_ate(tau_hat: &[Vec<f64>], tau: &[Vec<f64>], k: usize) -> Result<f64> {
    let pairs = check_pairs(tau_hat, tau, k).map(|_| tau.len())?;
    Ok(tau_hat.iter().zip(tau).map(|(h, t)| pair_ate_error(h, t)).sum::<f64>() / pairs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairMetrics {
    pub a: usize,
    pub b: usize,
    pub pehe: f64,
    pub ate_error: f64,
}

/// Metrics over one dataset. ITE metrics are `None` when the dataset has
/// no ground-truth potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub n_samples: usize,
    pub k: usize,
    pub pehe: Option<f64>,
    pub ate_error: Option<f64>,
    pub factual_mse: f64,
    pub pairs: Vec<PairMetrics>,
}

impl EvaluationReport {
    /// Report from predictions `[N, K]`, observed outcomes, and optionally
    /// the true potential outcomes `[N, K]`, all on one scale.
    pub fn from_predictions(pred: &Tensor, treatments: &[usize], y: &[f64], mu: Option<&Tensor>) -> Result<Self> {
        let (n, k) = (pred.rows(), pred.cols());
        if treatments.len() != n || y.len() != n || n == 0 {
            return Err(Error::invalid("predictions, treatments and outcomes disagree on length"));
        }
        let mut mse = 0.0;
        for (r, (&t, &yr)) in treatments.iter().zip(y).enumerate() {
            if t >= k {
                return Err(Error::Treatment { id: t + 1, k });
            }
            mse += (pred.get(r, t) - yr).powi(2);
        }
        let factual_mse = mse / n as f64;
        let mut report = Self { n_samples: n, k, pehe: None, ate_error: None, factual_mse, pairs: Vec::new() };
        let Some(mu) = mu else { return Ok(report) };
        if mu.rows() != n || mu.cols() != k {
            return Err(Error::Shape { op: "evaluate", lhs: pred.shape().to_vec(), rhs: mu.shape().to_vec() });
        }
        let pairs = treatment_pairs(k);
        let mut hats = Vec::with_capacity(pairs.len());
        let mut truths = Vec::with_capacity(pairs.len());
        for &(a, b) in &pairs {
            let hat = true_ite(pred, a, b)?;
            let truth = true_ite(mu, a, b)?;
            report.pairs.push(PairMetrics { a, b, pehe: pair_pehe(&hat, &truth), ate_error: pair_ate_error(&hat, &truth) });
            hats.push(hat);
            truths.push(truth);
        }
        if !pairs.is_empty() {
            report.pehe = Some(epsilon_pehe(&hats, &truths, k)?);
            report.ate_error = Some(epsilon_ate(&hats, &truths, k)?);
        }
        Ok(report)
    }

    /// Flat JSON object; unavailable metrics are `null`.
    pub fn to_json(&self) -> Value {
        let num = |v: Option<f64>| v.map_or(Value::Null, Value::from);
        let mut m = Map::new();
        m.insert("n_samples".into(), self.n_samples.into());
        m.insert("k".into(), self.k.into());
        m.insert("pehe".into(), num(self.pehe));
        m.insert("ate_error".into(), num(self.ate_error));
        m.insert("factual_mse".into(), self.factual_mse.into());
        for p in &self.pairs {
            m.insert(format!("pehe_{}_{}", p.a, p.b), p.pehe.into());
            m.insert(format!("ate_error_{}_{}", p.a, p.b), p.ate_error.into());
        }
        Value::Object(m)
    }
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
