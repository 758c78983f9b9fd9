//! Confounded synthetic data with known potential outcomes.
//!
//! With `c = t - 1` for 1-based treatment `t`, `p = c mod n0` and
//! `q = (c + 1) mod n0`:
//!
//! ```text
//! f_t(x) = sum_j sin(x_j) / sqrt(n0) + 0.5 c + sin((1 + 0.5 c) x_p) + 0.25 (-1)^c x_q^2
//! ```
//!
//! Covariates are standard normal, treatment is drawn from
//! `softmax(gamma * W x)` with `W ~ N(0, 1) / sqrt(n0)`, and the observed
//! outcome is `f_t(x) + N(0, sigma^2)`. Since `E[sin(a x)] = 0` and
//! `E[x^2] = 1`, the population mean of `f_t` is `0.5 c + 0.25 (-1)^c`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ObservationalDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAX_ASSIGNMENT_DRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub n0: usize,
    pub k: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!("need at least two treatments, got {}", self.k)));
        }
        if self.n0 == 0 {
            return Err(Error::invalid("need at least one covariate"));
        }
        if self.n < 10 * self.k {
            return Err(Error::invalid(format!("need n >= 10 K = {}, got {}", 10 * self.k, self.n)));
        }
        if !self.gamma.is_finite() || !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("gamma must be finite and sigma non-negative"));
        }
        Ok(())
    }
}

/// Noiseless outcome of 1-based treatment `t` at `x`.
pub fn outcome_function(t: usize, x: &[f64]) -> f64 {
    let n0 = x.len();
    let c = t - 1;
    let cf = c as f64;
    let (p, q) = (c % n0, (c + 1) % n0);
    let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
    x.iter().map(|v| v.sin()).sum::<f64>() / (n0 as f64).sqrt()
        + 0.5 * cf
        + ((1.0 + 0.5 * cf) * x[p]).sin()
        + 0.25 * sign * x[q] * x[q]
}

/// `E[f_a(x) - f_b(x)]` under standard normal covariates.
pub fn population_ate(a: usize, b: usize) -> f64 {
    let mean = |t: usize| {
        let c = t - 1;
        0.5 * c as f64 + if c % 2 == 0 { 0.25 } else { -0.25 }
    };
    mean(a) - mean(b)
}

/// A generated dataset and its true assignment probabilities `[N, K]`.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: ObservationalDataset,
    pub propensities: Tensor,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (t, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return t;
        }
    }
    probs.len() - 1
}

pub fn generate_with_propensities(cfg: &GeneratorConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let GeneratorConfig { n, n0, k, gamma, sigma, seed } = *cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n0 as f64).sqrt();
    let w: Vec<f64> = (0..k * n0)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|v: f64| v * scale)
        .collect();
    let x: Vec<f64> = (0..n * n0).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut probs = Vec::with_capacity(n * k);
    for i in 0..n {
        let xi = &x[i * n0..(i + 1) * n0];
        let logits: Vec<f64> = (0..k)
            .map(|t| gamma * w[t * n0..(t + 1) * n0].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        probs.extend(softmax(&logits));
    }

    let mut t = Vec::new();
    for attempt in 1..=MAX_ASSIGNMENT_DRAWS {
        t = (0..n).map(|i| draw(&probs[i * k..(i + 1) * k], rng.random::<f64>())).collect();
        let mut seen = vec![false; k];
        t.iter().for_each(|&v| seen[v] = true);
        if seen.iter().all(|&s| s) {
            break;
        }
        if attempt == MAX_ASSIGNMENT_DRAWS {
            return Err(Error::invalid(format!(
                "some treatment stayed empty after {MAX_ASSIGNMENT_DRAWS} assignment draws; increase n or lower gamma"
            )));
        }
    }

    let mut mu = Vec::with_capacity(n * k);
    for i in 0..n {
        let xi = &x[i * n0..(i + 1) * n0];
        mu.extend((1..=k).map(|tr| outcome_function(tr, xi)));
    }
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mu[i * k + t[i]] + sigma * z
        })
        .collect();
    let dataset = ObservationalDataset::new(
        Tensor::new(vec![n, n0], x)?,
        t,
        y,
        Some(Tensor::new(vec![n, k], mu)?),
        k,
    )?;
    Ok(SyntheticData { dataset, propensities: Tensor::new(vec![n, k], probs)? })
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<ObservationalDataset> {
    Ok(generate_with_propensities(cfg)?.dataset)
}

/// `<dir>/<stem>.meta.json` next to a dataset file.
pub fn meta_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    csv.with_file_name(format!("{stem}.meta.json"))
}

/// Writes the generator settings beside `csv`.
pub fn write_meta(cfg: &GeneratorConfig, csv: &Path) -> Result<PathBuf> {
    let path = meta_path(csv);
    let mut v = serde_json::to_value(cfg)?;
    v["generator"] = "kanite-synthetic-v1".into();
    std::fs::write(&path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(path)
}
