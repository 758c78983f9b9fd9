//! Minibatch training with early stopping, evaluation, and the
//! grid-size / spline-degree sweep.

mod optim;
mod runlog;
mod sweep;

pub use optim::{Optimizer, OptimizerKind};
pub use runlog::{EpochRecord, RunLog};
pub use sweep::{sweep, CellStatus, write_params_csv, write_sweep_csvs, SweepCell, SweepConfig, SweepRun, SweepTable};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{self, Document};
use crate::data::{ObservationalDataset, Standardizer};
use crate::error::{Error, Result};
use crate::kan::{count_parameters, Architecture, BoundModel, KaniteModel};
use crate::losses::{
    eb_dual_solve, eb_representation_loss, factual_mse, pairwise_ipm, pairwise_wasserstein_with, total_loss,
    EBDualState, EbSolverConfig, GroupedRepresentations, Ipm, DEFAULT_SINKHORN_ITERS,
};
use crate::metrics::EvaluationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mmd,
    Wass,
    Eb,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmd" => Ok(LossKind::Mmd),
            "wass" | "wasserstein" => Ok(LossKind::Wass),
            "eb" => Ok(LossKind::Eb),
            other => Err(Error::invalid(format!("unknown loss `{other}` (expected mmd, wass or eb)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mmd => "mmd",
            LossKind::Wass => "wass",
            LossKind::Eb => "eb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdKernel {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub loss: LossKind,
    pub mmd_kernel: MmdKernel,
    /// `None` uses the optimiser's default.
    pub lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub degree: usize,
    pub psi_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    /// Weight of the L1 penalty on spline coefficients.
    pub sparsify: f64,
    pub standardize_outcome: bool,
    pub sinkhorn_iters: usize,
    pub eb_iters: usize,
    pub eb_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            loss: LossKind::Mmd,
            mmd_kernel: MmdKernel::Linear,
            lr: None,
            optimizer: OptimizerKind::Adam,
            batch_size: 64,
            max_epochs: 500,
            patience: 20,
            seed: 0,
            grid_size: 5,
            degree: 3,
            psi_widths: vec![64, 64, 32],
            head_widths: vec![16],
            sparsify: 1e-5,
            standardize_outcome: true,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            eb_iters: 200,
            eb_lr: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad("alpha and beta must be finite and non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs < 1 {
            return bad("max epochs must be at least 1");
        }
        if self.lr.is_some_and(|lr| !(lr >= 0.0 && lr.is_finite())) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.sparsify >= 0.0 && self.sparsify.is_finite()) {
            return bad("sparsify weight must be finite and non-negative");
        }
        if self.grid_size < 1 {
            return bad("grid size must be at least 1");
        }
        if self.psi_widths.is_empty() || self.psi_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return bad("widths must be positive and the representation network non-empty");
        }
        if self.sinkhorn_iters < 1 || self.eb_iters < 1 || !(self.eb_lr > 0.0) {
            return bad("inner solver settings must be positive");
        }
        Ok(())
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.optimizer.default_lr())
    }

    pub fn architecture(&self, n_covariates: usize, treatments: usize) -> Architecture {
        Architecture {
            n_covariates,
            psi_widths: self.psi_widths.clone(),
            head_widths: self.head_widths.clone(),
            treatments,
            grid_size: self.grid_size,
            degree: self.degree,
        }
    }

    fn eb_solver(&self) -> EbSolverConfig {
        EbSolverConfig { iterations: self.eb_iters, lr: self.eb_lr, ..EbSolverConfig::default() }
    }
}

/// A model together with the scaler its inputs and outputs pass through.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: KaniteModel,
    pub scaler: Standardizer,
}

impl TrainedModel {
    /// Potential-outcome predictions `[N, K]` in the original outcome scale.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let scaled = self.model.predict(&self.scaler.transform_x(x)?)?;
        Ok(self.scaler.inverse_outcomes(&scaled))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.model, &self.scaler.to_document())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (model, doc) = checkpoint::load(path)?;
        Ok(Self { model, scaler: Standardizer::from_document(&doc)? })
    }

    pub fn to_document(&self) -> Document {
        let mut d = checkpoint::encode(&self.model);
        d.extend(self.scaler.to_document());
        d
    }
}

/// State at the moment a loss or gradient went non-finite.
#[derive(Debug)]
pub struct TrainAbort {
    pub epoch: usize,
    /// Which term failed: `L1`, `L2`, `sparsity` or `gradient`.
    pub term: String,
    pub detail: String,
    /// Parameters before the failing step.
    pub last_good: TrainedModel,
    pub log: RunLog,
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    /// The representation loss was skipped because a treatment was absent.
    pub l2_skipped: bool,
}

struct StepFailure {
    term: &'static str,
    error: Error,
}

fn tag<T>(term: &'static str, r: Result<T>) -> std::result::Result<T, StepFailure> {
    r.map_err(|error| StepFailure { term, error })
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Domain { .. } | Error::Sinkhorn { .. })
}

/// Quantities computed from detached representations during a step. The
/// gradient treats them as constants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrozenTerms {
    /// Sinkhorn regularisation per present treatment pair.
    pub epsilons: Vec<f64>,
    pub dual: Option<EBDualState>,
}

/// The minibatch objective on a tape.
pub struct Objective<'t> {
    pub l1: Var<'t>,
    /// `None` when `beta = 0` or fewer than two treatments are present.
    pub l2: Option<Var<'t>>,
    pub total: Var<'t>,
    pub frozen: FrozenTerms,
}

fn representation_loss<'t>(
    reps: Var<'t>,
    t: &[usize],
    k: usize,
    cfg: &TrainConfig,
    given: Option<&FrozenTerms>,
) -> Result<(Option<Var<'t>>, FrozenTerms)> {
    let groups = GroupedRepresentations::new(reps, t, k)?;
    let mut frozen = FrozenTerms::default();
    let value = match cfg.loss {
        LossKind::Wass => {
            let out = match given {
                Some(f) => pairwise_wasserstein_with(&groups, &f.epsilons, cfg.sinkhorn_iters)?,
                None => pairwise_ipm(&groups, Ipm::Wasserstein { epsilon: None, iterations: cfg.sinkhorn_iters })?,
            };
            frozen.epsilons = out.epsilons;
            (!out.degenerate).then_some(out.value)
        }
        LossKind::Mmd => {
            let kind = match cfg.mmd_kernel {
                MmdKernel::Linear => Ipm::LinearMmd,
                MmdKernel::Rbf => Ipm::RbfMmd,
            };
            let out = pairwise_ipm(&groups, kind)?;
            (!out.degenerate).then_some(out.value)
        }
        LossKind::Eb => {
            frozen.dual = match given {
                Some(f) => f.dual.clone(),
                None => eb_dual_solve(&groups, &cfg.eb_solver()),
            };
            match &frozen.dual {
                Some(dual) => Some(eb_representation_loss(&groups, dual)?),
                None => None,
            }
        }
    };
    Ok((value, frozen))
}

fn build_objective<'t>(
    bound: &BoundModel<'t>,
    x: Var<'t>,
    t: &[usize],
    y: &[f64],
    cfg: &TrainConfig,
    given: Option<&FrozenTerms>,
) -> std::result::Result<Objective<'t>, StepFailure> {
    let tape = x.tape();
    let (reps, preds) = tag("L1", bound.forward(x))?;
    let k = preds.shape()[1];
    let l1 = tag("L1", factual_mse(preds, t, y))?;
    let (l2, frozen) = if cfg.beta > 0.0 {
        tag("L2", representation_loss(reps, t, k, cfg, given))?
    } else {
        (None, FrozenTerms::default())
    };
    let zero = tape.constant(Tensor::from_parts(vec![], vec![0.0]));
    let mut total = tag("L2", total_loss(l1, l2.unwrap_or(zero), cfg.alpha, cfg.beta))?;
    if cfg.sparsify > 0.0 {
        let mut penalty = zero;
        for c in bound.coefficient_leaves() {
            penalty = tag("sparsity", c.abs().and_then(|a| a.sum()).and_then(|s| penalty.add(&s)))?;
        }
        total = tag("sparsity", penalty.scale(cfg.sparsify).and_then(|p| total.add(&p)))?;
    }
    Ok(Objective { l1, l2, total, frozen })
}

/// `alpha * L1 + beta * L2 + sparsify * sum |c|` on one minibatch. Pass the
/// `frozen` terms of an earlier call to evaluate the same function at other
/// parameter values.
pub fn objective<'t>(
    bound: &BoundModel<'t>,
    x: Var<'t>,
    t: &[usize],
    y: &[f64],
    cfg: &TrainConfig,
    frozen: Option<&FrozenTerms>,
) -> Result<Objective<'t>> {
    build_objective(bound, x, t, y, cfg, frozen).map_err(|f| f.error)
}

fn step_gradients(
    model: &KaniteModel,
    x: &Tensor,
    t: &[usize],
    y: &[f64],
    cfg: &TrainConfig,
) -> std::result::Result<(StepStats, Vec<Vec<f64>>), StepFailure> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let obj = build_objective(&bound, tape.constant(x.clone()), t, y, cfg, None)?;
    let stats = StepStats {
        l1: obj.l1.item(),
        l2: obj.l2.map_or(0.0, |v| v.item()),
        total: obj.total.item(),
        l2_skipped: cfg.beta > 0.0 && obj.l2.is_none(),
    };
    tag("gradient", obj.total.backward())?;
    let grads: Vec<Vec<f64>> = bound
        .leaves()
        .iter()
        .map(|v| v.grad().map(Tensor::into_data).unwrap_or_else(|| vec![0.0; v.value().numel()]))
        .collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(StepFailure {
            term: "gradient",
            error: Error::NonFinite { op: "backward", index: 0 },
        });
    }
    Ok((stats, grads))
}

/// One optimiser step on a minibatch already in the training scale.
/// Returns the losses and the gradients that were applied, in
/// [`KaniteModel::params`] order.
pub fn train_step(
    model: &mut KaniteModel,
    optimizer: &mut Optimizer,
    x: &Tensor,
    t: &[usize],
    y: &[f64],
    cfg: &TrainConfig,
) -> Result<(StepStats, Vec<Vec<f64>>)> {
    let (stats, grads) = step_gradients(model, x, t, y, cfg).map_err(|f| f.error)?;
    optimizer.step(model.params_mut(), &grads);
    Ok((stats, grads))
}

/// Full-batch factual MSE in the training scale.
pub fn factual_loss(model: &KaniteModel, ds: &ObservationalDataset) -> Result<f64> {
    let pred = model.predict(&ds.x)?;
    let k = pred.cols();
    let n = ds.n() as f64;
    Ok(ds.t.iter().zip(&ds.y).enumerate().map(|(r, (&t, &y))| (pred.data()[r * k + t] - y).powi(2)).sum::<f64>() / n)
}

fn check_schema(train: &ObservationalDataset, val: &ObservationalDataset) -> Result<()> {
    if train.n0() != val.n0() || train.k() != val.k() {
        return Err(Error::Schema(format!(
            "train has {} covariates and {} treatments, validation has {} and {}",
            train.n0(),
            train.k(),
            val.n0(),
            val.k()
        )));
    }
    if val.n() == 0 {
        return Err(Error::Schema("validation set is empty".into()));
    }
    if let Some(t) = train.group_sizes().iter().position(|&s| s == 0) {
        return Err(Error::Schema(format!("treatment {} is absent from the training set", t + 1)));
    }
    Ok(())
}

/// Trains on `train`, early-stopping on the factual MSE of `val`, and
/// returns the parameters with the lowest validation loss.
pub fn train(
    train: &ObservationalDataset,
    val: &ObservationalDataset,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, RunLog)> {
    cfg.validate()?;
    check_schema(train, val)?;
    let scaler = Standardizer::fit(train, cfg.standardize_outcome)?;
    let tr = scaler.apply(train)?;
    let va = scaler.apply(val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = cfg.architecture(train.n0(), train.k());
    let mut model = KaniteModel::init(&arch, &tr.x, &mut rng)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.effective_lr(), &sizes);

    let params = count_parameters(&model);
    let mut log = RunLog {
        params,
        initial_train_l1: factual_loss(&model, &tr)?,
        initial_val_l1: factual_loss(&model, &va)?,
        best_val_l1: f64::INFINITY,
        ..RunLog::default()
    };
    let mut best = model.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..tr.n()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut s1, mut s2, mut st, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = tr.x.select_rows(chunk);
            let t: Vec<usize> = chunk.iter().map(|&i| tr.t[i]).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| tr.y[i]).collect();
            match step_gradients(&model, &x, &t, &y, cfg) {
                Ok((stats, grads)) => {
                    optimizer.step(model.params_mut(), &grads);
                    s1 += stats.l1;
                    s2 += stats.l2;
                    st += stats.total;
                    batches += 1;
                    log.skipped_l2_batches += stats.l2_skipped as usize;
                }
                Err(f) if is_numeric_failure(&f.error) => {
                    return Err(Error::TrainingAborted(Box::new(TrainAbort {
                        epoch,
                        term: f.term.to_string(),
                        detail: f.error.to_string(),
                        last_good: TrainedModel { model, scaler },
                        log,
                    })));
                }
                Err(f) => return Err(f.error),
            }
        }
        let val_l1 = factual_loss(&model, &va)?;
        let b = batches.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train_l1: s1 / b,
            train_l2: s2 / b,
            train_total: st / b,
            val_l1,
            params,
        });
        log.wall_s.push(started.elapsed().as_secs_f64());
        log::debug!("epoch {epoch}: train {:.6} val {:.6}", s1 / b, val_l1);
        if val_l1 < log.best_val_l1 {
            log.best_val_l1 = val_l1;
            log.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    log.final_train_l1 = factual_loss(&best, &tr)?;
    Ok((TrainedModel { model: best, scaler }, log))
}

/// Metrics on `ds` in its original outcome scale.
pub fn evaluate(trained: &TrainedModel, ds: &ObservationalDataset) -> Result<EvaluationReport> {
    let pred = trained.predict(&ds.x)?;
    EvaluationReport::from_predictions(&pred, &ds.t, &ds.y, ds.mu.as_ref())
}

#[cfg(test)]
mod tests;
