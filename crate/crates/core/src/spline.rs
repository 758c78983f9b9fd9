//! B-spline bases and learnable univariate activations
//! `phi(x) = w_b * silu(x) + w_s * sum_i c_i B_i(x)`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{silu, silu_grad, CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Knot vector plus degree. Basis functions are defined on the working
/// interval `[knots[k], knots[len - k - 1]]`; inputs outside it are clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Knots("empty knot vector".into()));
        }
        if knots.len() < 2 * degree + 2 {
            return Err(Error::Knots(format!(
                "degree {degree} needs at least {} knots, got {}",
                2 * degree + 2,
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Knots("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Knots("knots must be non-decreasing".into()));
        }
        let basis = Self { degree, knots };
        if basis.hi() <= basis.lo() {
            return Err(Error::Knots("working interval has zero width".into()));
        }
        Ok(basis)
    }

    /// `grid_size` equal intervals on `[lo, hi]`, extended by `degree`
    /// knots of the same spacing past each end.
    pub fn uniform(lo: f64, hi: f64, grid_size: usize, degree: usize) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::Knots("grid size must be at least 1".into()));
        }
        if !(hi > lo) {
            return Err(Error::Knots(format!("empty interval [{lo}, {hi}]")));
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..grid_size + 2 * degree + 1)
            .map(|i| lo + (i as f64 - degree as f64) * h)
            .collect();
        Self::new(knots, degree)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of interior intervals.
    pub fn grid_size(&self) -> usize {
        self.knots.len() - 2 * self.degree - 1
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn lo(&self) -> f64 {
        self.knots[self.degree]
    }

    pub fn hi(&self) -> f64 {
        self.knots[self.knots.len() - self.degree - 1]
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo(), self.hi())
    }

    /// Index `s` of the knot span `[t_s, t_{s+1})` containing the clamped
    /// input; the right end of the working interval belongs to the last
    /// non-empty span.
    fn span(&self, x: f64) -> usize {
        let k = self.degree;
        let last = self.knots.len() - k - 2;
        if x >= self.hi() {
            let mut s = last;
            while s > k && self.knots[s] == self.knots[s + 1] {
                s -= 1;
            }
            return s;
        }
        // upper_bound over t_k..=t_last, minus one
        let slice = &self.knots[k..=last];
        let pos = slice.partition_point(|&t| t <= x);
        k + pos.saturating_sub(1)
    }

    /// Values and first derivatives of the `degree + 1` basis functions that
    /// can be non-zero at `x` (after clamping). Returns the index of the
    /// first of them. Derivatives are zero when `x` was clamped.
    pub fn eval_local(&self, x: f64, values: &mut [f64], derivs: &mut [f64]) -> usize {
        let k = self.degree;
        debug_assert!(values.len() > k && derivs.len() > k);
        let xc = self.clamp(x);
        let clamped = xc != x;
        let s = self.span(xc);
        let t = &self.knots;

        // Triangular Cox-de Boor table, keeping the degree k-1 row for the
        // derivative.
        let mut n = [0.0f64; 16];
        let mut prev = [0.0f64; 16];
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        assert!(k < 15, "spline degree {k} too large");
        n[0] = 1.0;
        for j in 1..=k {
            left[j] = xc - t[s + 1 - j];
            right[j] = t[s + j] - xc;
            let mut saved = 0.0;
            prev[..j].copy_from_slice(&n[..j]);
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        values[..=k].copy_from_slice(&n[..=k]);

        // B'_{i,k} = k (B_{i,k-1} / (t_{i+k} - t_i) - B_{i+1,k-1} / (t_{i+k+1} - t_{i+1}))
        let first = s - k;
        for r in 0..=k {
            derivs[r] = 0.0;
        }
        if k > 0 && !clamped {
            for r in 0..=k {
                let i = first + r;
                let lower = if r > 0 { prev[r - 1] } else { 0.0 };
                let upper = if r < k { prev[r] } else { 0.0 };
                let d1 = t[i + k] - t[i];
                let d2 = t[i + k + 1] - t[i + 1];
                let a = if d1 != 0.0 { lower / d1 } else { 0.0 };
                let b = if d2 != 0.0 { upper / d2 } else { 0.0 };
                derivs[r] = k as f64 * (a - b);
            }
        }
        first
    }

    /// Dense basis matrix, one row per input.
    pub fn eval(&self, xs: &[f64]) -> Vec<Vec<f64>> {
        let nb = self.num_basis();
        let k = self.degree;
        let mut vals = vec![0.0; k + 1];
        let mut ders = vec![0.0; k + 1];
        xs.iter()
            .map(|&x| {
                let mut row = vec![0.0; nb];
                let first = self.eval_local(x, &mut vals, &mut ders);
                row[first..=first + k].copy_from_slice(&vals);
                row
            })
            .collect()
    }
}

/// Basis matrix of shape `len(xs) x (G + k)`.
pub fn basis_eval(basis: &BSplineBasis, xs: &[f64]) -> Result<Tensor> {
    if let Some(index) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            op: "basis_eval",
            index,
        });
    }
    let rows = basis.eval(xs);
    Tensor::new(vec![xs.len(), basis.num_basis()], rows.concat())
}

/// Uniform grid over `[min - margin, max + margin]` of the samples.
pub fn grid_from_samples(samples: &[f64], grid_size: usize, degree: usize, margin: f64) -> Result<BSplineBasis> {
    if samples.is_empty() {
        return Err(Error::invalid("grid_from_samples: no samples"));
    }
    if grid_size == 0 {
        return Err(Error::invalid("grid_from_samples: grid size must be at least 1"));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("grid_from_samples: non-finite sample"));
    }
    let margin = if margin > 0.0 { margin } else { 1e-3 };
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    BSplineBasis::uniform(lo - margin, hi + margin, grid_size, degree)
}

/// One learnable activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFunction {
    pub basis: BSplineBasis,
    pub coefficients: Vec<f64>,
    pub residual_weight: f64,
    pub spline_weight: f64,
}

impl SplineFunction {
    pub fn new(basis: BSplineBasis, coefficients: Vec<f64>, residual_weight: f64, spline_weight: f64) -> Result<Self> {
        if coefficients.len() != basis.num_basis() {
            return Err(Error::invalid(format!(
                "spline needs {} coefficients, got {}",
                basis.num_basis(),
                coefficients.len()
            )));
        }
        Ok(Self {
            basis,
            coefficients,
            residual_weight,
            spline_weight,
        })
    }

    /// `c ~ Normal(0, std)`, `w_b = w_s = 1`.
    pub fn random<R: Rng + ?Sized>(basis: BSplineBasis, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let coefficients = (0..basis.num_basis()).map(|_| normal.sample(rng)).collect();
        Self {
            basis,
            coefficients,
            residual_weight: 1.0,
            spline_weight: 1.0,
        }
    }

    /// Plain evaluation without a tape.
    pub fn eval(&self, x: f64) -> f64 {
        let row = &self.basis.eval(&[x])[0];
        let s: f64 = row.iter().zip(&self.coefficients).map(|(b, c)| b * c).sum();
        self.residual_weight * silu(x) + self.spline_weight * s
    }

    /// Coefficients, residual and spline weight as trainable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundSpline<'t> {
        let n = self.coefficients.len();
        BoundSpline {
            basis: Arc::new(vec![self.basis.clone()]),
            coefficients: tape.leaf(Tensor::from_parts(vec![1, 1, n], self.coefficients.clone())),
            residual_weight: tape.leaf(Tensor::from_parts(vec![1, 1], vec![self.residual_weight])),
            spline_weight: tape.leaf(Tensor::from_parts(vec![1, 1], vec![self.spline_weight])),
        }
    }
}

pub struct BoundSpline<'t> {
    basis: Arc<Vec<BSplineBasis>>,
    pub coefficients: Var<'t>,
    pub residual_weight: Var<'t>,
    pub spline_weight: Var<'t>,
}

/// Elementwise `phi(x)` over a vector (or a one-column batch).
pub fn spline_forward<'t>(f: &BoundSpline<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let n = match shape.as_slice() {
        [n] | [n, 1] => *n,
        s => {
            return Err(Error::Shape {
                op: "spline_forward",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let col = x.reshape(&[n, 1])?;
    let out = kan_edges(
        col,
        f.coefficients,
        f.residual_weight,
        f.spline_weight,
        Arc::clone(&f.basis),
    )?;
    out.reshape(&shape)
}

/// Fused evaluation of a full matrix of edge activations:
/// `out[b, j] = sum_i w_b[j,i] silu(x[b,i]) + w_s[j,i] sum_c coef[j,i,c] B_c^i(x[b,i])`.
///
/// Shapes: `x [batch, n_in]`, `coef [n_out, n_in, nb]`, `w_b, w_s [n_out, n_in]`.
/// `bases[i]` is the knot grid shared by every edge leaving input `i`.
pub fn kan_edges<'t>(
    x: Var<'t>,
    coef: Var<'t>,
    residual_w: Var<'t>,
    spline_w: Var<'t>,
    bases: Arc<Vec<BSplineBasis>>,
) -> Result<Var<'t>> {
    let xv = x.value();
    let cv = coef.value();
    let bv = residual_w.value();
    let sv = spline_w.value();
    let (batch, n_in) = match xv.shape() {
        [b, i] => (*b, *i),
        s => {
            return Err(Error::Shape {
                op: "kan_edges",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let (n_out, nb) = match cv.shape() {
        [o, i, nb] if *i == n_in => (*o, *nb),
        s => {
            return Err(Error::Shape {
                op: "kan_edges",
                lhs: xv.shape().to_vec(),
                rhs: s.to_vec(),
            })
        }
    };
    if bv.shape() != [n_out, n_in] || sv.shape() != [n_out, n_in] {
        return Err(Error::Shape {
            op: "kan_edges",
            lhs: vec![n_out, n_in],
            rhs: bv.shape().to_vec(),
        });
    }
    if bases.len() != n_in {
        return Err(Error::invalid(format!("kan_edges: {} bases for {} inputs", bases.len(), n_in)));
    }
    let degree = bases[0].degree();
    if bases.iter().any(|b| b.degree() != degree || b.num_basis() != nb) {
        return Err(Error::invalid("kan_edges: bases disagree with coefficient layout"));
    }
    if let Some(index) = xv.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "kan_edges",
            index,
        });
    }

    let kp1 = degree + 1;
    let mut cache = EdgeCache {
        first: vec![0; batch * n_in],
        values: vec![0.0; batch * n_in * kp1],
        derivs: vec![0.0; batch * n_in * kp1],
        silu: vec![0.0; batch * n_in],
        dsilu: vec![0.0; batch * n_in],
        batch,
        n_in,
        n_out,
        nb,
        kp1,
    };
    let xd = xv.data();
    for b in 0..batch {
        for i in 0..n_in {
            let p = b * n_in + i;
            let xi = xd[p];
            cache.first[p] = bases[i].eval_local(
                xi,
                &mut cache.values[p * kp1..(p + 1) * kp1],
                &mut cache.derivs[p * kp1..(p + 1) * kp1],
            );
            cache.silu[p] = silu(xi);
            cache.dsilu[p] = silu_grad(xi);
        }
    }

    let c = cv.data();
    let wb = bv.data();
    let ws = sv.data();
    let mut out = vec![0.0; batch * n_out];
    for b in 0..batch {
        for j in 0..n_out {
            let mut acc = 0.0;
            for i in 0..n_in {
                let p = b * n_in + i;
                let e = j * n_in + i;
                acc += wb[e] * cache.silu[p] + ws[e] * cache.spline_sum(c, p, e);
            }
            out[b * n_out + j] = acc;
        }
    }
    let tape = x.tape();
    tape.custom(
        &[x, coef, residual_w, spline_w],
        Tensor::from_parts(vec![batch, n_out], out),
        Box::new(cache),
    )
}

struct EdgeCache {
    first: Vec<usize>,
    values: Vec<f64>,
    derivs: Vec<f64>,
    silu: Vec<f64>,
    dsilu: Vec<f64>,
    batch: usize,
    n_in: usize,
    n_out: usize,
    nb: usize,
    kp1: usize,
}

impl EdgeCache {
    #[inline]
    fn spline_sum(&self, coef: &[f64], p: usize, e: usize) -> f64 {
        let off = e * self.nb + self.first[p];
        let vals = &self.values[p * self.kp1..(p + 1) * self.kp1];
        vals.iter().zip(&coef[off..off + self.kp1]).map(|(v, c)| v * c).sum()
    }

    #[inline]
    fn spline_deriv(&self, coef: &[f64], p: usize, e: usize) -> f64 {
        let off = e * self.nb + self.first[p];
        let ders = &self.derivs[p * self.kp1..(p + 1) * self.kp1];
        ders.iter().zip(&coef[off..off + self.kp1]).map(|(v, c)| v * c).sum()
    }
}

impl CustomOp for EdgeCache {
    fn name(&self) -> &'static str {
        "kan_edges"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _output: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let coef = inputs[1].data();
        let wb = inputs[2].data();
        let ws = inputs[3].data();
        let (n_in, n_out, kp1) = (self.n_in, self.n_out, self.kp1);
        let mut gx = vec![0.0; self.batch * n_in];
        let mut gc = vec![0.0; coef.len()];
        let mut gwb = vec![0.0; wb.len()];
        let mut gws = vec![0.0; ws.len()];
        for b in 0..self.batch {
            for j in 0..n_out {
                let go = g[b * n_out + j];
                if go == 0.0 {
                    continue;
                }
                for i in 0..n_in {
                    let p = b * n_in + i;
                    let e = j * n_in + i;
                    gwb[e] += go * self.silu[p];
                    gws[e] += go * self.spline_sum(coef, p, e);
                    let scale = go * ws[e];
                    let off = e * self.nb + self.first[p];
                    let vals = &self.values[p * kp1..(p + 1) * kp1];
                    for (gcv, v) in gc[off..off + kp1].iter_mut().zip(vals) {
                        *gcv += scale * v;
                    }
                    if needs[0] {
                        gx[p] += go * (wb[e] * self.dsilu[p] + ws[e] * self.spline_deriv(coef, p, e));
                    }
                }
            }
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(gc),
            needs[2].then_some(gwb),
            needs[3].then_some(gws),
        ]
    }
}
