//! Entropy balancing: maximum-entropy sample weights that equalise the
//! weighted representation mean across treatment groups.
//!
//! For each group `t` the weights are a softmax of `v_t . psi_i` with
//! `v_t = -sum_{s != t} lambda_{t,s}` and `lambda_{s,t} = -lambda_{t,s}`.
//! The duals minimise `sum_t log sum_{i in t} exp(v_t . psi_i)`, whose
//! gradient for the pair `t < s` is `m_s - m_t` with `m_t` the weighted
//! group mean; at the optimum every pair is balanced.

use super::GroupedRepresentations;
use crate::autodiff::{logsumexp, Tensor, Var};
use crate::error::{Error, Result};

/// Full-batch gradient descent settings for the dual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EbSolverConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Stop early once every dual gradient entry is below this.
    pub tolerance: Option<f64>,
    /// Consecutive objective increases that count as divergence.
    pub divergence_window: usize,
    pub max_restarts: usize,
}

impl Default for EbSolverConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr: 0.1,
            tolerance: None,
            divergence_window: 10,
            max_restarts: 3,
        }
    }
}

/// Solved duals and the weights they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct EBDualState {
    k: usize,
    d: usize,
    /// `lambda_{t,s}` for `t < s`, in `(0,1), (0,2), .., (1,2), ..` order.
    lambda: Vec<Vec<f64>>,
    /// Per-group weights in group row order.
    pub weights: Vec<Vec<f64>>,
    /// `||m_t - m_s||_inf` per pair, same order as the duals.
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub restarts: usize,
}

fn pair_index(k: usize, t: usize, s: usize) -> usize {
    debug_assert!(t < s && s < k);
    t * (2 * k - t - 1) / 2 + (s - t - 1)
}

fn pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |t| (t + 1..k).map(move |s| (t, s)))
}

impl EBDualState {
    /// Duals given directly, with weights and residuals computed for
    /// `groups`.
    pub fn from_lambda(lambda: Vec<Vec<f64>>, groups: &[Tensor]) -> Result<Self> {
        let k = groups.len();
        let d = groups.first().map_or(0, Tensor::cols);
        if lambda.len() != k * k.saturating_sub(1) / 2 || lambda.iter().any(|l| l.len() != d) {
            return Err(Error::invalid("dual variables do not match the group layout"));
        }
        if lambda.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dual variables must be finite"));
        }
        let mut state = Self {
            k,
            d,
            lambda,
            weights: Vec::new(),
            residuals: Vec::new(),
            objective: 0.0,
            iterations: 0,
            restarts: 0,
        };
        state.refresh(groups);
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `lambda_{t,s}` for any `t != s`, using antisymmetry.
    pub fn lambda(&self, t: usize, s: usize) -> Vec<f64> {
        match t.cmp(&s) {
            std::cmp::Ordering::Less => self.lambda[pair_index(self.k, t, s)].clone(),
            std::cmp::Ordering::Greater => self.lambda[pair_index(self.k, s, t)].iter().map(|v| -v).collect(),
            std::cmp::Ordering::Equal => vec![0.0; self.d],
        }
    }

    /// `v_t = -sum_{s != t} lambda_{t,s}`.
    pub fn direction(&self, t: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        for s in (0..self.k).filter(|&s| s != t) {
            for (vi, l) in v.iter_mut().zip(self.lambda(t, s)) {
                *vi -= l;
            }
        }
        v
    }

    /// Largest balance residual over all pairs.
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    fn refresh(&mut self, groups: &[Tensor]) {
        let mut objective = 0.0;
        let mut means = Vec::with_capacity(self.k);
        self.weights.clear();
        for (t, g) in groups.iter().enumerate() {
            let v = self.direction(t);
            let scores = scores(g, &v);
            objective += logsumexp(&scores);
            let w = softmax(&scores);
            means.push(weighted_mean(g, &w));
            self.weights.push(w);
        }
        self.objective = objective;
        self.residuals = pairs(self.k)
            .map(|(t, s)| {
                means[t]
                    .iter()
                    .zip(&means[s])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
    }

    fn gradient(&self, groups: &[Tensor]) -> Vec<Vec<f64>> {
        let means: Vec<Vec<f64>> = groups
            .iter()
            .zip(&self.weights)
            .map(|(g, w)| weighted_mean(g, w))
            .collect();
        pairs(self.k)
            .map(|(t, s)| means[s].iter().zip(&means[t]).map(|(a, b)| a - b).collect())
            .collect()
    }
}

fn scores(g: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..g.rows())
        .map(|r| g.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn weighted_mean(g: &Tensor, w: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; g.cols()];
    for (r, wr) in w.iter().enumerate() {
        for (mi, x) in m.iter_mut().zip(g.row(r)) {
            *mi += wr * x;
        }
    }
    m
}

fn present_values(groups: &GroupedRepresentations<'_>) -> Option<Vec<Tensor>> {
    groups.values().into_iter().collect()
}

/// Gradient descent on the dual. Returns `None` when a group is empty.
pub fn eb_dual_solve(groups: &GroupedRepresentations<'_>, config: &EbSolverConfig) -> Option<EBDualState> {
    let values = present_values(groups)?;
    if values.len() < 2 {
        return None;
    }
    Some(solve(&values, config))
}

fn solve(groups: &[Tensor], config: &EbSolverConfig) -> EBDualState {
    let k = groups.len();
    let d = groups[0].cols();
    let zero = || EBDualState::from_lambda(vec![vec![0.0; d]; k * (k - 1) / 2], groups).expect("consistent layout");
    let mut lr = config.lr;
    let mut restarts = 0;
    let mut total_iters = 0;
    loop {
        let mut state = zero();
        let mut best = state.clone();
        let mut rising = 0;
        let mut diverged = false;
        for _ in 0..config.iterations {
            let grad = state.gradient(groups);
            if let Some(tol) = config.tolerance {
                if grad.iter().flatten().all(|g| g.abs() < tol) {
                    break;
                }
            }
            let prev = state.objective;
            for (l, g) in state.lambda.iter_mut().zip(&grad) {
                for (li, gi) in l.iter_mut().zip(g) {
                    *li -= lr * gi;
                }
            }
            state.refresh(groups);
            total_iters += 1;
            if !state.objective.is_finite() || state.lambda.iter().flatten().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
            rising = if state.objective > prev { rising + 1 } else { 0 };
            if state.objective <= best.objective {
                best = state.clone();
            }
            if rising >= config.divergence_window {
                diverged = true;
                break;
            }
        }
        if diverged && restarts < config.max_restarts {
            restarts += 1;
            lr *= 0.5;
            continue;
        }
        let mut out = if diverged { best } else { state };
        out.iterations = total_iters;
        out.restarts = restarts;
        return out;
    }
}

/// Weights induced by `dual` on the current group values.
pub fn eb_weights(dual: &EBDualState, groups: &GroupedRepresentations<'_>) -> Result<Vec<Vec<f64>>> {
    let values = present_values(groups).ok_or_else(|| Error::invalid("entropy balancing with an empty group"))?;
    if values.len() != dual.k {
        return Err(Error::invalid("dual and groups disagree on the number of treatments"));
    }
    Ok(values
        .iter()
        .enumerate()
        .map(|(t, g)| softmax(&scores(g, &dual.direction(t))))
        .collect())
}

/// `sum_i w_i log w_i` with `w` recomputed on the tape from the live
/// representations and the constant duals.
pub fn eb_representation_loss<'t>(groups: &GroupedRepresentations<'t>, dual: &EBDualState) -> Result<Var<'t>> {
    if groups.k() != dual.k {
        return Err(Error::invalid("dual and groups disagree on the number of treatments"));
    }
    let mut total: Option<Var<'t>> = None;
    for t in 0..groups.k() {
        let g = groups
            .group(t)
            .ok_or_else(|| Error::invalid("entropy balancing with an empty group"))?;
        let n = g.shape()[0];
        let v = g.tape().constant(Tensor::new(vec![dual.d, 1], dual.direction(t))?);
        let scores = g.matmul(&v)?;
        let log_w = scores.sub(&scores.reshape(&[1, n])?.logsumexp_rows()?)?.reshape(&[1, n])?;
        let w = log_w.exp()?;
        debug_assert!(w.value().data().iter().all(|&x| x > 0.0));
        let term = w.mul(&log_w)?.sum()?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("entropy balancing over zero groups"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::losses::eb_oracle;

    fn tensor(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn groups_of<'t>(tape: &'t Tape, gs: &[Tensor]) -> GroupedRepresentations<'t> {
        GroupedRepresentations::from_groups(gs.iter().map(|g| Some(tape.leaf(g.clone()))).collect()).unwrap()
    }

    #[test]
    fn pair_indexing() {
        let k = 4;
        let idx: Vec<usize> = pairs(k).map(|(t, s)| pair_index(k, t, s)).collect();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn identical_groups_give_zero_duals() {
        let g = tensor(&[vec![0.3, -1.0], vec![1.2, 0.4], vec![-0.5, 0.9]]);
        let tape = Tape::new();
        let dual = eb_dual_solve(&groups_of(&tape, &[g.clone(), g]), &EbSolverConfig::default()).unwrap();
        assert!(dual.lambda(0, 1).iter().all(|v| v.abs() < 1e-12));
        for w in &dual.weights {
            assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn singletons_have_unit_weight() {
        let tape = Tape::new();
        let gs = [tensor(&[vec![0.0]]), tensor(&[vec![1.0]])];
        let dual = eb_dual_solve(&groups_of(&tape, &gs), &EbSolverConfig::default()).unwrap();
        assert_eq!(dual.weights, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn empty_group_skips() {
        let tape = Tape::new();
        let g = tape.leaf(tensor(&[vec![1.0]]));
        let groups = GroupedRepresentations::from_groups(vec![Some(g), None]).unwrap();
        assert!(eb_dual_solve(&groups, &EbSolverConfig::default()).is_none());
    }

    #[test]
    fn zero_duals_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gs: Vec<Tensor> = [3usize, 5]
            .iter()
            .map(|&n| Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let dual = EBDualState::from_lambda(vec![vec![0.0, 0.0]], &gs).unwrap();
        assert_eq!(dual.weights[0], vec![1.0 / 3.0; 3]);
        assert_eq!(dual.weights[1], vec![1.0 / 5.0; 5]);
        let tape = Tape::new();
        let loss = eb_representation_loss(&groups_of(&tape, &gs), &dual).unwrap().item();
        assert!((loss - (-(3f64).ln() - (5f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn constant_rows_ignore_dual_scale() {
        let gs = vec![tensor(&vec![vec![0.5, 0.5]; 4]), tensor(&vec![vec![1.0, -1.0]; 2])];
        let a = EBDualState::from_lambda(vec![vec![0.0, 0.0]], &gs).unwrap();
        let b = EBDualState::from_lambda(vec![vec![3.0, -7.0]], &gs).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn weights_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gs: Vec<Tensor> = [2usize, 3, 2]
            .iter()
            .map(|&n| Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let lam: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let dual = EBDualState::from_lambda(lam.clone(), &gs).unwrap();
        let get = |t: usize, s: usize| -> Vec<f64> {
            let idx = |a: usize, b: usize| match (a, b) {
                (0, 1) => 0,
                (0, 2) => 1,
                _ => 2,
            };
            if t < s { lam[idx(t, s)].clone() } else { lam[idx(s, t)].iter().map(|v| -v).collect() }
        };
        let tape = Tape::new();
        let groups = groups_of(&tape, &gs);
        let w = eb_weights(&dual, &groups).unwrap();
        let mut oracle_loss = 0.0;
        for t in 0..3 {
            let raw: Vec<f64> = (0..gs[t].rows())
                .map(|i| {
                    let e: f64 = (0..3)
                        .filter(|&s| s != t)
                        .map(|s| get(t, s).iter().zip(gs[t].row(i)).map(|(l, x)| l * x).sum::<f64>())
                        .sum();
                    (-e).exp()
                })
                .collect();
            let z: f64 = raw.iter().sum();
            for (i, r) in raw.iter().enumerate() {
                let wi = r / z;
                assert!((w[t][i] - wi).abs() < 1e-14);
                oracle_loss += wi * wi.ln();
            }
        }
        let loss = eb_representation_loss(&groups, &dual).unwrap().item();
        assert!((loss - oracle_loss).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::autodiff::gradcheck::{check_gradients, max_relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gs: Vec<Tensor> = [3usize, 2]
            .iter()
            .map(|&n| Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let dual = EBDualState::from_lambda(vec![vec![0.8, -0.3]], &gs).unwrap();
        let report = check_gradients(&gs, 1e-5, |v| {
            let g = GroupedRepresentations::from_groups(v.iter().map(|x| Some(*x)).collect())?;
            eb_representation_loss(&g, &dual)
        })
        .unwrap();
        assert!(max_relative_error(&report) < 1e-4);
    }

    #[test]
    fn dual_matches_primal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = EbSolverConfig {
            iterations: 200_000,
            tolerance: Some(1e-11),
            ..EbSolverConfig::default()
        };
        for case in 0..12 {
            let inst = eb_oracle::random_instance(&mut rng, 2 + case % 2, 6, 1 + case % 2);
            let primal = eb_oracle::max_entropy_weights(&inst.groups, &inst.feasible);
            let gs: Vec<Tensor> = inst.groups.iter().map(|g| tensor(g)).collect();
            let tape = Tape::new();
            let dual = eb_dual_solve(&groups_of(&tape, &gs), &config).unwrap();
            for (wd, wp) in dual.weights.iter().zip(&primal) {
                assert!((wd.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (a, b) in wd.iter().zip(wp) {
                    assert!(*a > 0.0);
                    assert!((a - b).abs() < 1e-3, "case {case}: {a} vs {b}");
                }
            }
            assert!(dual.max_residual() < 1e-3, "case {case}: residual {}", dual.max_residual());
        }
    }

    #[test]
    fn divergence_triggers_restart() {
        let gs = vec![
            tensor(&[vec![-3.0], vec![4.0], vec![0.5]]),
            tensor(&[vec![3.0], vec![-2.0]]),
        ];
        let tape = Tape::new();
        let config = EbSolverConfig { lr: 1e3, divergence_window: 1, ..EbSolverConfig::default() };
        let groups = groups_of(&tape, &gs);
        let dual = eb_dual_solve(&groups, &config).unwrap();
        assert_eq!(dual.restarts, 3);
        let start = EBDualState::from_lambda(vec![vec![0.0]], &gs).unwrap();
        assert!(dual.objective <= start.objective);
    }
}
