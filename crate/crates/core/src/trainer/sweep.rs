use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate, train, TrainConfig};
use crate::data::{split, ObservationalDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::kan::Architecture;
use crate::metrics::mean_std;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub base: TrainConfig,
    pub split: SplitSpec,
    pub grid_sizes: Vec<usize>,
    pub degrees: Vec<usize>,
    pub repetitions: usize,
    /// Seed of repetition `r` is `base_seed + r`; it drives both the split
    /// and the training run.
    pub base_seed: u64,
    /// Worker threads; 1 runs everything on the calling thread.
    pub jobs: usize,
}

/// Outcome of one training run in the sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRun {
    pub grid: usize,
    pub degree: usize,
    pub seed: u64,
    pub pehe: Option<f64>,
    pub ate: Option<f64>,
    pub params: usize,
    pub epochs: usize,
    pub wall_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Complete,
    Partial,
    Failed,
}

/// Aggregate over the repetitions of one `(grid, degree)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub grid: usize,
    pub degree: usize,
    pub runs: usize,
    pub failures: usize,
    pub pehe_mean: f64,
    pub pehe_std: f64,
    pub ate_mean: f64,
    pub ate_std: f64,
    pub params: usize,
    pub epochs_mean: f64,
    pub epochs_std: f64,
    pub wall_s_mean: f64,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub runs: Vec<SweepRun>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn all_failed(&self) -> bool {
        self.cells.iter().all(|c| c.status == CellStatus::Failed)
    }
}

fn run_one(ds: &ObservationalDataset, cfg: &SweepConfig, grid: usize, degree: usize, seed: u64) -> SweepRun {
    let mut tc = cfg.base.clone();
    tc.grid_size = grid;
    tc.degree = degree;
    tc.seed = seed;
    let params = tc.architecture(ds.n0(), ds.k()).parameter_count();
    let started = Instant::now();
    let outcome = (|| {
        let (tr, va, _) = split(ds, &SplitSpec { seed, ..cfg.split })?;
        let (model, log) = train(&tr, &va, &tc)?;
        let report = evaluate(&model, ds)?;
        Ok::<_, Error>((report, log.best_epoch))
    })();
    let wall_s = started.elapsed().as_secs_f64();
    match outcome {
        Ok((report, epochs)) => SweepRun {
            grid,
            degree,
            seed,
            pehe: report.pehe,
            ate: report.ate_error,
            params,
            epochs,
            wall_s,
            error: None,
        },
        Err(e) => {
            log::warn!("sweep run G={grid} k={degree} seed={seed} failed: {e}");
            SweepRun { grid, degree, seed, pehe: None, ate: None, params, epochs: 0, wall_s, error: Some(e.to_string()) }
        }
    }
}

fn aggregate(grid: usize, degree: usize, params: usize, runs: &[&SweepRun]) -> SweepCell {
    let ok: Vec<&&SweepRun> = runs.iter().filter(|r| r.error.is_none()).collect();
    let col = |f: &dyn Fn(&SweepRun) -> f64| -> (f64, f64) {
        let v: Vec<f64> = ok.iter().map(|r| f(r)).collect();
        if v.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&v)
        }
    };
    let (pehe_mean, pehe_std) = col(&|r| r.pehe.unwrap_or(f64::NAN));
    let (ate_mean, ate_std) = col(&|r| r.ate.unwrap_or(f64::NAN));
    let (epochs_mean, epochs_std) = col(&|r| r.epochs as f64);
    let (wall_s_mean, _) = col(&|r| r.wall_s);
    let failures = runs.len() - ok.len();
    let status = match failures {
        0 => CellStatus::Complete,
        f if f == runs.len() => CellStatus::Failed,
        _ => CellStatus::Partial,
    };
    SweepCell {
        grid,
        degree,
        runs: runs.len(),
        failures,
        pehe_mean,
        pehe_std,
        ate_mean,
        ate_std,
        params,
        epochs_mean,
        epochs_std,
        wall_s_mean,
        status,
    }
}

/// Trains every `(grid, degree)` pair `repetitions` times and evaluates
/// each model on the whole of `ds`. Failed runs are recorded, not fatal.
pub fn sweep(ds: &ObservationalDataset, cfg: &SweepConfig) -> Result<SweepTable> {
    if cfg.grid_sizes.is_empty() || cfg.degrees.is_empty() || cfg.repetitions == 0 {
        return Err(Error::invalid("sweep needs at least one grid size, one degree and one repetition"));
    }
    cfg.split.validate()?;
    let mut jobs = Vec::new();
    for &g in &cfg.grid_sizes {
        for &d in &cfg.degrees {
            let mut probe = cfg.base.clone();
            probe.grid_size = g;
            probe.degree = d;
            probe.validate()?;
            for r in 0..cfg.repetitions {
                jobs.push((g, d, cfg.base_seed + r as u64));
            }
        }
    }
    let runs: Vec<SweepRun> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(|&(g, d, s)| run_one(ds, cfg, g, d, s)).collect())
    } else {
        jobs.iter().map(|&(g, d, s)| run_one(ds, cfg, g, d, s)).collect()
    };
    let mut cells = Vec::new();
    for &g in &cfg.grid_sizes {
        for &d in &cfg.degrees {
            let members: Vec<&SweepRun> = runs.iter().filter(|r| r.grid == g && r.degree == d).collect();
            let params = members[0].params;
            cells.push(aggregate(g, d, params, &members));
        }
    }
    Ok(SweepTable { runs, cells })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Writes `sweep.csv` (one row per cell, metric means, seed = first seed of
/// the cell), `sweep_stats.csv` (means, stds and status) and
/// `sweep_runs.csv` (one row per run) into `dir`.
pub fn write_sweep_csvs(table: &SweepTable, base_seed: u64, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(["grid", "degree", "seed", "pehe", "ate", "params", "epochs", "wall_s"])?;
    for c in &table.cells {
        w.write_record([
            c.grid.to_string(),
            c.degree.to_string(),
            base_seed.to_string(),
            fmt(c.pehe_mean),
            fmt(c.ate_mean),
            c.params.to_string(),
            fmt(c.epochs_mean),
            fmt(c.wall_s_mean),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("sweep_stats.csv"))?;
    w.write_record([
        "grid", "degree", "runs", "failures", "pehe_mean", "pehe_std", "ate_mean", "ate_std", "params",
        "epochs_mean", "epochs_std", "status",
    ])?;
    for c in &table.cells {
        let status = serde_json::to_value(c.status)?.as_str().unwrap_or_default().to_string();
        w.write_record([
            c.grid.to_string(),
            c.degree.to_string(),
            c.runs.to_string(),
            c.failures.to_string(),
            fmt(c.pehe_mean),
            fmt(c.pehe_std),
            fmt(c.ate_mean),
            fmt(c.ate_std),
            c.params.to_string(),
            fmt(c.epochs_mean),
            fmt(c.epochs_std),
            status,
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("sweep_runs.csv"))?;
    w.write_record(["grid", "degree", "seed", "pehe", "ate", "params", "epochs", "error", "wall_s"])?;
    for r in &table.runs {
        w.write_record([
            r.grid.to_string(),
            r.degree.to_string(),
            r.seed.to_string(),
            fmt_opt(r.pehe),
            fmt_opt(r.ate),
            r.params.to_string(),
            r.epochs.to_string(),
            r.error.clone().unwrap_or_default(),
            fmt(r.wall_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parameter count per `(grid, degree)` for the given widths.
pub fn write_params_csv(
    base: &TrainConfig,
    n_covariates: usize,
    treatments: usize,
    grid_sizes: &[usize],
    degrees: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["grid", "degree", "params"])?;
    for &g in grid_sizes {
        for &d in degrees {
            let arch = Architecture { grid_size: g, degree: d, ..base.architecture(n_covariates, treatments) };
            w.write_record([g.to_string(), d.to_string(), arch.parameter_count().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
