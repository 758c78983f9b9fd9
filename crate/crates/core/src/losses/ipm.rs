use super::GroupedRepresentations;
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SINKHORN_ITERS: usize = 50;
const EPS_FACTOR: f64 = 0.1;
const EPS_FLOOR: f64 = 1e-3;

/// Distributional distance used by [`pairwise_ipm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ipm {
    /// Squared distance between group means.
    LinearMmd,
    /// Gaussian-kernel MMD with the median bandwidth heuristic.
    RbfMmd,
    /// Entropic optimal transport; `epsilon: None` picks [`default_epsilon`].
    Wasserstein { epsilon: Option<f64>, iterations: usize },
}

impl Ipm {
    pub fn wasserstein() -> Self {
        Ipm::Wasserstein { epsilon: None, iterations: DEFAULT_SINKHORN_ITERS }
    }
}

fn check_pair(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<(usize, usize, usize)> {
    match (a.shape().as_slice(), b.shape().as_slice()) {
        ([n, d], [m, e]) if d == e && *n > 0 && *m > 0 => Ok((*n, *m, *d)),
        (l, r) => Err(Error::Shape { op, lhs: l.to_vec(), rhs: r.to_vec() }),
    }
}

/// `||mean(A) - mean(B)||^2`.
pub fn mmd_squared<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_pair("mmd", &a, &b)?;
    a.mean_rows()?.sub(&b.mean_rows()?)?.square()?.sum()
}

/// Squared Euclidean distances `[n, m]` between the rows of `a` and `b`,
/// formed from explicit differences so identical rows give exact zeros.
pub fn pairwise_sq_distances<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (n, m, _) = check_pair("pairwise_sq_distances", &a, &b)?;
    let ia: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let ib: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
    a.index_select(&ia)?
        .sub(&b.index_select(&ib)?)?
        .square()?
        .sum_axis(1)?
        .reshape(&[n, m])
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gaussian-kernel squared MMD, `k(x, y) = exp(-|x - y|^2 / (2 h^2))` with
/// `h^2` the median pooled squared distance (detached).
pub fn mmd_squared_rbf<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_pair("mmd_rbf", &a, &b)?;
    let pooled = Var::concat(&[a, b], 0)?;
    let all = pairwise_sq_distances(pooled, pooled)?;
    let h2 = median(all.value().data()).max(1e-12);
    let kernel = |x: Var<'t>, y: Var<'t>| -> Result<Var<'t>> {
        pairwise_sq_distances(x, y)?.scale(-0.5 / h2)?.exp()?.mean()
    };
    kernel(a, a)?
        .add(&kernel(b, b)?)?
        .sub(&kernel(a, b)?.scale(2.0)?)
}

/// `0.1 * median(cost)` with a small floor.
pub fn default_epsilon(cost: &Tensor) -> f64 {
    (EPS_FACTOR * median(cost.data())).max(EPS_FLOOR)
}

fn col_add<'t>(m: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    m.transpose()?.add(&v)?.transpose()
}

/// `<P, C>` after `iters` alternating log-domain Sinkhorn sweeps that
/// update the row potential first.
fn sinkhorn_cost<'t>(cost: Var<'t>, eps: f64, iters: usize) -> Result<Var<'t>> {
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    let tape = cost.tape();
    let log_a = eps * (1.0 / n as f64).ln();
    let log_b = eps * (1.0 / m as f64).ln();
    let neg_cost = cost.neg()?;
    let neg_cost_t = neg_cost.transpose()?;
    let mut g = tape.constant(Tensor::zeros(&[m]));
    let mut f = tape.constant(Tensor::zeros(&[n]));
    for _ in 0..iters.max(1) {
        f = neg_cost.add(&g)?.scale(1.0 / eps)?.logsumexp_rows()?.scale(-eps)?.add_scalar(log_a)?;
        g = neg_cost_t.add(&f)?.scale(1.0 / eps)?.logsumexp_rows()?.scale(-eps)?.add_scalar(log_b)?;
    }
    let plan = col_add(neg_cost.add(&g)?, f)?.scale(1.0 / eps)?.exp()?;
    plan.mul(&cost)?.sum()
}

/// Entropic optimal-transport cost `<P, C>` between uniform empirical
/// measures on the rows of `a` and `b`, with `C` the squared Euclidean
/// cost and `P` from `iters` log-domain Sinkhorn iterations recorded on
/// the tape. The value averages the runs on `C` and `C^T`, so it is
/// exactly symmetric in `a` and `b`.
pub fn wasserstein<'t>(a: Var<'t>, b: Var<'t>, eps: f64, iters: usize) -> Result<Var<'t>> {
    check_pair("wasserstein", &a, &b)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("wasserstein: eps must be positive, got {eps}")));
    }
    let cost = pairwise_sq_distances(a, b)?;
    let diagnose = |e: Error| match e {
        Error::NonFinite { .. } | Error::Domain { .. } => {
            let c = cost.value();
            Error::Sinkhorn {
                min: c.data().iter().cloned().fold(f64::INFINITY, f64::min),
                max: c.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                median: median(c.data()),
                eps,
            }
        }
        other => other,
    };
    let run = || -> Result<Var<'t>> {
        let forward = sinkhorn_cost(cost, eps, iters)?;
        let backward = sinkhorn_cost(cost.transpose()?, eps, iters)?;
        forward.add(&backward)?.scale(0.5)
    };
    run().map_err(diagnose)
}

/// Averaged pairwise IPM and what was evaluated.
#[derive(Debug, Clone)]
pub struct IpmOutcome<'t> {
    pub value: Var<'t>,
    pub evaluated_pairs: usize,
    pub skipped_pairs: usize,
    /// Sinkhorn regularisation of each evaluated pair (empty for MMD).
    pub epsilons: Vec<f64>,
    /// Fewer than two non-empty groups: `value` is a constant zero.
    pub degenerate: bool,
}

/// Mean of `kind` over all unordered treatment pairs with both groups
/// present.
pub fn pairwise_ipm<'t>(groups: &GroupedRepresentations<'t>, kind: Ipm) -> Result<IpmOutcome<'t>> {
    pairwise(groups, kind, None)
}

/// Pairwise Sinkhorn distance with one given `eps` per present pair, in
/// the order of [`IpmOutcome::epsilons`].
pub fn pairwise_wasserstein_with<'t>(
    groups: &GroupedRepresentations<'t>,
    epsilons: &[f64],
    iterations: usize,
) -> Result<IpmOutcome<'t>> {
    pairwise(groups, Ipm::Wasserstein { epsilon: None, iterations }, Some(epsilons))
}

fn pairwise<'t>(groups: &GroupedRepresentations<'t>, kind: Ipm, fixed: Option<&[f64]>) -> Result<IpmOutcome<'t>> {
    let k = groups.k();
    if k < 2 {
        return Err(Error::invalid("pairwise IPM needs at least two treatments"));
    }
    let mut terms = Vec::new();
    let mut skipped = 0;
    let mut tape = None;
    let mut epsilons = Vec::new();
    for a in 0..k {
        for b in 0..a {
            let (Some(ga), Some(gb)) = (groups.group(a), groups.group(b)) else {
                skipped += 1;
                continue;
            };
            tape = Some(ga.tape());
            let term = match kind {
                Ipm::LinearMmd => mmd_squared(ga, gb)?,
                Ipm::RbfMmd => mmd_squared_rbf(ga, gb)?,
                Ipm::Wasserstein { epsilon, iterations } => {
                    let eps = match (fixed, epsilon) {
                        (Some(f), _) => *f.get(epsilons.len()).ok_or_else(|| {
                            Error::invalid(format!("{} epsilons given for more present pairs", f.len()))
                        })?,
                        (None, Some(e)) => e,
                        (None, None) => default_epsilon(&pairwise_sq_distances(ga.detach(), gb.detach())?.value()),
                    };
                    epsilons.push(eps);
                    wasserstein(ga, gb, eps, iterations)?
                }
            };
            terms.push(term);
        }
    }
    let evaluated = terms.len();
    if let Some(f) = fixed.filter(|f| f.len() != evaluated) {
        return Err(Error::invalid(format!("{} epsilons given for {evaluated} present pairs", f.len())));
    }
    let value = match terms.split_first() {
        Some((first, rest)) => {
            let mut acc = *first;
            for t in rest {
                acc = acc.add(t)?;
            }
            acc.scale(1.0 / evaluated as f64)?
        }
        None => {
            let any = (0..k).find_map(|t| groups.group(t));
            let tape = tape.or(any.map(|v| v.tape())).ok_or_else(|| {
                Error::invalid("pairwise IPM over a minibatch with no representations")
            })?;
            tape.constant(Tensor::from_parts(vec![], vec![0.0]))
        }
    };
    Ok(IpmOutcome {
        value,
        evaluated_pairs: evaluated,
        skipped_pairs: skipped,
        epsilons,
        degenerate: evaluated == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng, shift: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .map(|v: f64| v + shift)
            .collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Exact OT between equal-size uniform point sets: the best permutation.
    fn brute_force_ot(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        permutations(n)
            .iter()
            .map(|p| (0..n).map(|i| (a[i] - b[p[i]]).powi(2)).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn mmd_trivial_cases() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        assert_eq!(mmd_squared(a, b).unwrap().item(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = tape.leaf(mat(5, 3, &mut rng, 0.0));
        assert_eq!(mmd_squared(r, r).unwrap().item(), 0.0);
        assert!(mmd_squared_rbf(r, r).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn mmd_matches_mean_difference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ta, tb) = (mat(5, 3, &mut rng, 0.0), mat(7, 3, &mut rng, 0.5));
        let mut oracle = 0.0;
        for c in 0..3 {
            let ma: f64 = ta.column(c).iter().sum::<f64>() / 5.0;
            let mb: f64 = tb.column(c).iter().sum::<f64>() / 7.0;
            oracle += (ma - mb).powi(2);
        }
        let tape = Tape::new();
        let v = mmd_squared(tape.leaf(ta), tape.leaf(tb)).unwrap().item();
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn mmd_grows_with_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ta, tb) = (mat(6, 2, &mut rng, 0.0), mat(6, 2, &mut rng, 0.0));
        let mut prev = -1.0;
        for shift in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let moved: Vec<f64> = tb.data().iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + shift } else { *v }).collect();
            let tape = Tape::new();
            let v = mmd_squared(tape.constant(ta.clone()), tape.constant(Tensor::new(vec![6, 2], moved).unwrap())).unwrap().item();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn rbf_mmd_matches_kernel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ta, tb) = (mat(3, 2, &mut rng, 0.0), mat(4, 2, &mut rng, 1.0));
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let (ra, rb) = (rows(&ta), rows(&tb));
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let pooled: Vec<_> = ra.iter().chain(&rb).collect();
        let mut all: Vec<f64> = pooled.iter().flat_map(|x| pooled.iter().map(move |y| sq(x, y))).collect();
        all.sort_by(f64::total_cmp);
        let h2 = 0.5 * (all[all.len() / 2 - 1] + all[all.len() / 2]);
        let kmean = |p: &[Vec<f64>], q: &[Vec<f64>]| {
            p.iter().flat_map(|x| q.iter().map(move |y| (-sq(x, y) / (2.0 * h2)).exp())).sum::<f64>() / (p.len() * q.len()) as f64
        };
        let oracle = kmean(&ra, &ra) + kmean(&rb, &rb) - 2.0 * kmean(&ra, &rb);
        let tape = Tape::new();
        let v = mmd_squared_rbf(tape.leaf(ta), tape.leaf(tb)).unwrap().item();
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_single_points() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 1], vec![1.7]).unwrap());
        let v = wasserstein(a, b, 0.1, 50).unwrap().item();
        assert!((v - 1.7 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_identical_sets_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = mat(8, 2, &mut rng, 0.0);
        let tape = Tape::new();
        let a = tape.leaf(t);
        let v = wasserstein(a, a, 0.1, 50).unwrap().item();
        assert!((0.0..0.05).contains(&v), "{v}");
    }

    #[test]
    fn wasserstein_near_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let (ta, tb) = (mat(4, 1, &mut rng, 0.0), mat(4, 1, &mut rng, 2.0));
            let exact = brute_force_ot(ta.data(), tb.data());
            let tape = Tape::new();
            let v = wasserstein(tape.constant(ta), tape.constant(tb), 0.01, 500).unwrap().item();
            assert!((v - exact).abs() / exact < 0.05, "{v} vs {exact}");
        }
    }

    #[test]
    fn wasserstein_approaches_exact_as_eps_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (ta, tb) = (mat(5, 1, &mut rng, 0.0), mat(5, 1, &mut rng, 1.0));
        let exact = brute_force_ot(ta.data(), tb.data());
        let mut prev_gap = f64::INFINITY;
        for eps in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let tape = Tape::new();
            let v = wasserstein(tape.constant(ta.clone()), tape.constant(tb.clone()), eps, 20_000).unwrap().item();
            assert!(v >= 0.0);
            let gap = (v - exact).abs();
            assert!(gap <= prev_gap + 1e-9, "eps {eps}: gap {gap} after {prev_gap}");
            prev_gap = gap;
        }
    }

    #[test]
    fn wasserstein_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (ta, tb) = (mat(5, 2, &mut rng, 0.0), mat(7, 2, &mut rng, 0.5));
        let tape = Tape::new();
        let (a, b) = (tape.constant(ta), tape.constant(tb));
        let ab = wasserstein(a, b, 0.1, 200).unwrap().item();
        let ba = wasserstein(b, a, 0.1, 200).unwrap().item();
        assert!((ab - ba).abs() < 1e-8);
    }

    #[test]
    fn pairwise_reduces_to_single_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let (a, b) = (tape.leaf(mat(4, 2, &mut rng, 0.0)), tape.leaf(mat(3, 2, &mut rng, 1.0)));
        let g = GroupedRepresentations::from_groups(vec![Some(a), Some(b)]).unwrap();
        let out = pairwise_ipm(&g, Ipm::LinearMmd).unwrap();
        assert_eq!(out.value.item(), mmd_squared(b, a).unwrap().item());
        let w = pairwise_ipm(&g, Ipm::Wasserstein { epsilon: Some(0.2), iterations: 50 }).unwrap();
        assert_eq!(w.value.item(), wasserstein(b, a, 0.2, 50).unwrap().item());
    }

    #[test]
    fn pairwise_three_groups_and_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tape = Tape::new();
        let gs: Vec<Var> = (0..3).map(|i| tape.leaf(mat(3 + i, 2, &mut rng, i as f64))).collect();
        let g = GroupedRepresentations::from_groups(gs.iter().map(|v| Some(*v)).collect()).unwrap();
        let oracle = (mmd_squared(gs[1], gs[0]).unwrap().item()
            + mmd_squared(gs[2], gs[0]).unwrap().item()
            + mmd_squared(gs[2], gs[1]).unwrap().item())
            / 3.0;
        assert!((pairwise_ipm(&g, Ipm::LinearMmd).unwrap().value.item() - oracle).abs() < 1e-12);

        let same = GroupedRepresentations::from_groups(vec![Some(gs[0]); 3]).unwrap();
        assert_eq!(pairwise_ipm(&same, Ipm::LinearMmd).unwrap().value.item(), 0.0);

        let partial = GroupedRepresentations::from_groups(vec![Some(gs[0]), None, Some(gs[2])]).unwrap();
        let out = pairwise_ipm(&partial, Ipm::LinearMmd).unwrap();
        assert_eq!((out.evaluated_pairs, out.skipped_pairs), (1, 2));
        assert_eq!(out.value.item(), mmd_squared(gs[2], gs[0]).unwrap().item());

        let lonely = GroupedRepresentations::from_groups(vec![Some(gs[0]), None]).unwrap();
        let out = pairwise_ipm(&lonely, Ipm::LinearMmd).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.value.item(), 0.0);
    }

    #[test]
    fn explicit_epsilons_reproduce_defaults() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tape = Tape::new();
        let groups = GroupedRepresentations::from_groups(vec![
            Some(tape.leaf(mat(4, 2, &mut rng, 0.0))),
            Some(tape.leaf(mat(3, 2, &mut rng, 1.0))),
            Some(tape.leaf(mat(2, 2, &mut rng, -1.0))),
        ])
        .unwrap();
        let auto = pairwise_ipm(&groups, Ipm::wasserstein()).unwrap();
        assert_eq!(auto.epsilons.len(), 3);
        let fixed = pairwise_wasserstein_with(&groups, &auto.epsilons, DEFAULT_SINKHORN_ITERS).unwrap();
        assert_eq!(fixed.value.item(), auto.value.item());
        assert!(pairwise_wasserstein_with(&groups, &auto.epsilons[..2], DEFAULT_SINKHORN_ITERS).is_err());
    }

    #[test]
    fn ipm_gradients_match_finite_differences() {
        use crate::autodiff::gradcheck::{check_gradients, max_relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![mat(4, 2, &mut rng, 0.0), mat(3, 2, &mut rng, 1.0)];
        for kind in [Ipm::LinearMmd, Ipm::Wasserstein { epsilon: Some(0.5), iterations: 20 }] {
            let report = check_gradients(&inputs, 1e-5, |v| {
                let g = GroupedRepresentations::from_groups(vec![Some(v[0]), Some(v[1])])?;
                Ok(pairwise_ipm(&g, kind)?.value)
            })
            .unwrap();
            let err = max_relative_error(&report);
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }
}
