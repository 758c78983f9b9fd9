//! Primal maximum-entropy oracle for entropy balancing, independent of the
//! dual solver: damped Newton on `sum w log w` restricted to the affine
//! constraint set, started from a known strictly feasible point.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

pub struct EbInstance {
    /// `groups[t][i]` is a point in R^d.
    pub groups: Vec<Vec<Vec<f64>>>,
    /// A strictly positive feasible weighting.
    pub feasible: Vec<Vec<f64>>,
}

/// `k` groups over at most `n_max` points in `d` dimensions, shifted so a
/// known positive weighting balances every group mean at a common target.
pub fn random_instance<R: Rng>(rng: &mut R, k: usize, n_max: usize, d: usize) -> EbInstance {
    let mut sizes = vec![1usize; k];
    for _ in k..n_max {
        if rng.random_bool(0.7) {
            let t = rng.random_range(0..k);
            sizes[t] += 1;
        }
    }
    let target: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut groups = Vec::with_capacity(k);
    let mut feasible = Vec::with_capacity(k);
    for &n in &sizes {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let z: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let mut pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        for j in 0..d {
            let mean: f64 = pts.iter().zip(&w).map(|(p, wi)| wi * p[j]).sum();
            for p in pts.iter_mut() {
                p[j] += target[j] - mean;
            }
        }
        groups.push(pts);
        feasible.push(w);
    }
    EbInstance { groups, feasible }
}

fn constraint_matrix(groups: &[Vec<Vec<f64>>]) -> DMatrix<f64> {
    let k = groups.len();
    let d = groups[0][0].len();
    let n: usize = groups.iter().map(Vec::len).sum();
    let offsets: Vec<usize> = groups
        .iter()
        .scan(0, |acc, g| {
            let o = *acc;
            *acc += g.len();
            Some(o)
        })
        .collect();
    let mut a = DMatrix::zeros(k + (k - 1) * d, n);
    for (t, g) in groups.iter().enumerate() {
        for i in 0..g.len() {
            a[(t, offsets[t] + i)] = 1.0;
        }
    }
    for t in 1..k {
        for j in 0..d {
            let row = k + (t - 1) * d + j;
            for (i, p) in groups[0].iter().enumerate() {
                a[(row, offsets[0] + i)] += p[j];
            }
            for (i, p) in groups[t].iter().enumerate() {
                a[(row, offsets[t] + i)] -= p[j];
            }
        }
    }
    a
}

fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = a.transpose() * a;
    let eig = SymmetricEigen::new(gram);
    let scale = eig.eigenvalues.iter().cloned().fold(1.0, f64::max);
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &v)| v.abs() < 1e-10 * scale)
        .map(|(i, _)| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(a.ncols(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn neg_entropy(w: &DVector<f64>) -> f64 {
    w.iter().map(|v| v * v.ln()).sum()
}

/// Minimiser of `sum w log w` subject to unit group sums and equal
/// weighted group means.
pub fn max_entropy_weights(groups: &[Vec<Vec<f64>>], start: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let z = null_space(&constraint_matrix(groups));
    let mut w = DVector::from_iterator(start.iter().map(Vec::len).sum(), start.iter().flatten().cloned());
    if z.ncols() > 0 {
        for _ in 0..200 {
            let g = w.map(|v| v.ln() + 1.0);
            let reduced = z.transpose() * &g;
            if reduced.amax() < 1e-14 {
                break;
            }
            let h = DMatrix::from_diagonal(&w.map(|v| 1.0 / v));
            let hz = z.transpose() * h * &z;
            let u = hz.cholesky().expect("positive definite").solve(&(-&reduced));
            let dw = &z * u;
            let f0 = neg_entropy(&w);
            let slope = g.dot(&dw);
            let mut step = 1.0;
            loop {
                let cand = &w + &dw * step;
                if cand.iter().all(|&v| v > 0.0) && neg_entropy(&cand) <= f0 + 1e-4 * step * slope {
                    w = cand;
                    break;
                }
                step *= 0.5;
                if step < 1e-20 {
                    break;
                }
            }
            if step < 1e-20 {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in groups {
        out.push(w.as_slice()[offset..offset + g.len()].to_vec());
        offset += g.len();
    }
    out
}
