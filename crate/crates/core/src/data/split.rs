use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ObservationalDataset;
use crate::error::{Error, Result};

/// Train/validation/test fractions and the shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.63, val: 0.27, test: 0.10, seed: 0 }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions must be in [0, 1] and sum to 1, got {:?}",
                f
            )));
        }
        Ok(())
    }
}

/// Row indices of each part, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `total` slots over groups in proportion to `sizes`, capped by
/// `capacity`, using largest remainders.
fn apportion(total: usize, sizes: &[usize], frac: f64, capacity: &[usize]) -> Vec<usize> {
    let ideal: Vec<f64> = sizes.iter().map(|&n| n as f64 * frac).collect();
    let mut alloc: Vec<usize> = ideal
        .iter()
        .zip(capacity)
        .map(|(v, &c)| (v.floor() as usize).min(c))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(alloc.iter().sum());
    while remaining > 0 {
        let before = remaining;
        for &g in &order {
            if remaining > 0 && alloc[g] < capacity[g] {
                alloc[g] += 1;
                remaining -= 1;
            }
        }
        if remaining == before {
            break;
        }
    }
    alloc
}

/// Stratified split with exact part totals `round(train * N)`,
/// `round(val * N)` and the remainder, deterministic in `spec.seed`.
pub fn split_indices(t: &[usize], k: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = t.len();
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train);
    let mut members = vec![Vec::new(); k];
    for (i, &g) in t.iter().enumerate() {
        members[g].push(i);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let train = apportion(n_train, &sizes, spec.train, &sizes);
    let left: Vec<usize> = sizes.iter().zip(&train).map(|(s, a)| s - a).collect();
    let val = apportion(n_val, &sizes, spec.val, &left);
    let mut counts: Vec<[usize; 3]> = (0..k).map(|g| [train[g], val[g], sizes[g] - train[g] - val[g]]).collect();

    let fractions = [spec.train, spec.val, spec.test];
    for g in 0..k {
        if sizes[g] < 3 {
            if sizes[g] > 0 {
                log::warn!("treatment {} has {} rows; stratification relaxed", g + 1, sizes[g]);
            }
            continue;
        }
        for part in 0..3 {
            if counts[g][part] > 0 || fractions[part] == 0.0 {
                continue;
            }
            let donor = (0..3).max_by_key(|&p| (counts[g][p], 3 - p)).expect("three parts");
            counts[g][donor] -= 1;
            counts[g][part] += 1;
            let payer = (0..k).find(|&h| h != g && counts[h][part] >= 2);
            match payer {
                Some(h) => {
                    counts[h][part] -= 1;
                    counts[h][donor] += 1;
                }
                None => {
                    counts[g][part] -= 1;
                    counts[g][donor] += 1;
                    log::warn!("split too small to give treatment {} a row in every part", g + 1);
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitIndices { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (g, idx) in members.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let [a, b, _] = counts[g];
        out.train.extend_from_slice(&idx[..a]);
        out.val.extend_from_slice(&idx[a..a + b]);
        out.test.extend_from_slice(&idx[a + b..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Train, validation and test subsets of `ds`.
pub fn split(ds: &ObservationalDataset, spec: &SplitSpec) -> Result<(ObservationalDataset, ObservationalDataset, ObservationalDataset)> {
    let idx = split_indices(&ds.t, ds.k(), spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.val), ds.subset(&idx.test)))
}
