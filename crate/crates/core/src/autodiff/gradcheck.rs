//! Central finite-difference checks for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, in units of `max(1, |f|)`:
/// gradients below it are compared by absolute difference, since the
/// round-off of `f(x+h) - f(x-h)` grows with `|f|`.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Analytic and numeric gradient for one input tensor.
#[derive(Debug, Clone)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `RELATIVE_FLOOR * max(1, |f|)` at the checked point.
    pub floor: f64,
}

impl GradComparison {
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(*a, *n, self.floor))
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn max_relative_error(report: &[GradComparison]) -> f64 {
    report
        .iter()
        .map(GradComparison::max_relative_error)
        .fold(0.0, f64::max)
}

/// Evaluates `build` on leaves holding `inputs`, backpropagates, and
/// compares every input gradient with `(f(x+h) - f(x-h)) / 2h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<Vec<GradComparison>>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(build(&vars)?.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&vars)?;
    if !loss.value().is_scalar() {
        return Err(Error::NotScalar(loss.shape()));
    }
    let floor = RELATIVE_FLOOR * loss.item().abs().max(1.0);
    loss.backward()?;

    let mut out = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = var
            .grad()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let mut perturbed = inputs.to_vec();
            let shape = inputs[k].shape().to_vec();
            let mut data = inputs[k].data().to_vec();
            data[i] += h;
            perturbed[k] = Tensor::new(shape.clone(), data.clone())?;
            let plus = eval(&perturbed)?;
            data[i] -= 2.0 * h;
            perturbed[k] = Tensor::new(shape, data)?;
            let minus = eval(&perturbed)?;
            numeric.push((plus - minus) / (2.0 * h));
        }
        out.push(GradComparison { analytic, numeric, floor });
    }
    Ok(out)
}
