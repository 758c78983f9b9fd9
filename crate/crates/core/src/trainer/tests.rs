use super::*;
use crate::data::{generate_synthetic, split, GeneratorConfig, SplitSpec};

fn small(loss: LossKind) -> TrainConfig {
    TrainConfig {
        loss,
        psi_widths: vec![4, 3],
        head_widths: vec![3],
        batch_size: 16,
        max_epochs: 4,
        patience: 2,
        eb_iters: 20,
        sinkhorn_iters: 10,
        ..TrainConfig::default()
    }
}

fn data(n: usize, k: usize, gamma: f64, sigma: f64, seed: u64) -> ObservationalDataset {
    generate_synthetic(&GeneratorConfig { n, n0: 3, k, gamma, sigma, seed }).unwrap()
}

fn parts(ds: &ObservationalDataset) -> (ObservationalDataset, ObservationalDataset, ObservationalDataset) {
    split(ds, &SplitSpec::default()).unwrap()
}

fn identity_scaler(n0: usize) -> Standardizer {
    Standardizer { x_mean: vec![0.0; n0], x_std: vec![1.0; n0], y_mean: 0.0, y_std: 1.0 }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { alpha: -1.0, ..TrainConfig::default() },
        TrainConfig { beta: f64::NAN, ..TrainConfig::default() },
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { patience: 0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert_eq!(TrainConfig::default().effective_lr(), 1e-3);
    assert_eq!("WASS".parse::<LossKind>().unwrap(), LossKind::Wass);
    assert!("tarnet".parse::<LossKind>().is_err());
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let ds = data(120, 2, 1.0, 0.5, 1);
    let (tr, va, _) = parts(&ds);
    for opt in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = TrainConfig { lr: Some(0.0), optimizer: opt, patience: 10, ..small(LossKind::Mmd) };
        let (trained, log) = train(&tr, &va, &cfg).unwrap();
        let scaler = Standardizer::fit(&tr, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = KaniteModel::init(&cfg.architecture(3, 2), &scaler.apply(&tr).unwrap().x, &mut rng).unwrap();
        assert_eq!(trained.model, init);
        assert_eq!(log.epochs.len(), 4);
    }
}

#[test]
fn fixed_seed_is_bitwise_reproducible() {
    let ds = data(150, 3, 1.0, 0.5, 2);
    let (tr, va, _) = parts(&ds);
    for loss in [LossKind::Mmd, LossKind::Wass, LossKind::Eb] {
        let cfg = small(loss);
        let (a, la) = train(&tr, &va, &cfg).unwrap();
        let (b, lb) = train(&tr, &va, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.to_jsonl(), lb.to_jsonl());
    }
}

#[test]
fn beta_zero_is_loss_kind_invariant() {
    let ds = data(150, 3, 1.0, 0.5, 3);
    let (tr, va, _) = parts(&ds);
    let logs: Vec<String> = [LossKind::Mmd, LossKind::Wass, LossKind::Eb]
        .into_iter()
        .map(|loss| train(&tr, &va, &TrainConfig { beta: 0.0, ..small(loss) }).unwrap().1.to_jsonl())
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0], logs[2]);
}

#[test]
fn returned_model_has_minimum_validation_loss() {
    let ds = data(150, 2, 1.0, 0.5, 4);
    let (tr, va, _) = parts(&ds);
    let cfg = TrainConfig { max_epochs: 8, patience: 3, lr: Some(0.05), ..small(LossKind::Wass) };
    let (trained, log) = train(&tr, &va, &cfg).unwrap();
    let val = factual_loss(&trained.model, &trained.scaler.apply(&va).unwrap()).unwrap();
    assert_eq!(val, log.min_val_l1());
    assert_eq!(val, log.best_val_l1);
    assert!(log.epochs.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
}

#[test]
fn sgd_step_matches_captured_gradients() {
    let ds = data(60, 2, 1.0, 0.5, 5);
    let cfg = TrainConfig { optimizer: OptimizerKind::Sgd, lr: Some(0.03), ..small(LossKind::Eb) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = KaniteModel::init(&cfg.architecture(3, 2), &ds.x, &mut rng).unwrap();
    let before: Vec<Vec<f64>> = model.params().into_iter().cloned().collect();
    let sizes: Vec<usize> = before.iter().map(Vec::len).collect();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.03, &sizes);
    let rows: Vec<usize> = (0..16).collect();
    let t: Vec<usize> = rows.iter().map(|&i| ds.t[i]).collect();
    let y: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
    let (_, grads) = train_step(&mut model, &mut opt, &ds.x.select_rows(&rows), &t, &y, &cfg).unwrap();
    assert!(grads.iter().flatten().any(|&g| g != 0.0));
    for ((p, b), g) in model.params().into_iter().zip(&before).zip(&grads) {
        for i in 0..p.len() {
            assert_eq!(p[i], b[i] - 0.03 * g[i]);
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let mut ds = data(60, 2, 1.0, 0.5, 6);
    let (tr, va, _) = parts(&ds);
    ds = tr;
    let cfg = TrainConfig { lr: Some(1e300), optimizer: OptimizerKind::Sgd, ..small(LossKind::Mmd) };
    match train(&ds, &va, &cfg) {
        Err(Error::TrainingAborted(abort)) => {
            assert!(["L1", "L2", "sparsity", "gradient"].contains(&abort.term.as_str()));
            assert!(abort.epoch >= 1);
            assert!(abort.last_good.model.params().iter().all(|p| p.iter().all(|v| v.is_finite())));
        }
        other => panic!("expected an abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn oracle_model_has_zero_error() {
    let ds = data(80, 3, 1.0, 0.5, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = KaniteModel::init(&small(LossKind::Mmd).architecture(3, 3), &ds.x, &mut rng).unwrap();
    let trained = TrainedModel { model, scaler: identity_scaler(3) };
    let mu = trained.predict(&ds.x).unwrap();
    let mut oracle = ds;
    oracle.mu = Some(mu);
    let report = evaluate(&trained, &oracle).unwrap();
    assert_eq!(report.pehe, Some(0.0));
    assert_eq!(report.ate_error, Some(0.0));
}

#[test]
fn zero_heads_score_the_mean_squared_effect() {
    let ds = data(90, 3, 1.0, 0.5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = KaniteModel::init(&small(LossKind::Mmd).architecture(3, 3), &ds.x, &mut rng).unwrap();
    for head in &mut model.heads {
        let last = head.layers.last_mut().unwrap();
        last.coefficients.iter_mut().for_each(|c| *c = 0.0);
        last.residual_weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let trained = TrainedModel { model, scaler: identity_scaler(3) };
    let report = evaluate(&trained, &ds).unwrap();
    let mu = ds.mu.as_ref().unwrap();
    let (mut pehe, mut ate, mut pairs) = (0.0, 0.0, 0.0);
    for a in 0..3 {
        for b in 0..a {
            let tau: Vec<f64> = (0..ds.n()).map(|i| mu.get(i, a) - mu.get(i, b)).collect();
            pehe += tau.iter().map(|v| v * v).sum::<f64>() / ds.n() as f64;
            ate += (tau.iter().sum::<f64>() / ds.n() as f64).abs();
            pairs += 1.0;
        }
    }
    assert!((report.pehe.unwrap() - pehe / pairs).abs() < 1e-12);
    assert!((report.ate_error.unwrap() - ate / pairs).abs() < 1e-12);
}

#[test]
fn row_permutation_leaves_report_unchanged() {
    let ds = data(70, 2, 1.0, 0.5, 9);
    let (tr, va, _) = parts(&ds);
    let (trained, _) = train(&tr, &va, &small(LossKind::Mmd)).unwrap();
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let a = evaluate(&trained, &ds).unwrap();
    let b = evaluate(&trained, &ds.subset(&order)).unwrap();
    assert!((a.pehe.unwrap() - b.pehe.unwrap()).abs() < 1e-12);
    assert!((a.ate_error.unwrap() - b.ate_error.unwrap()).abs() < 1e-12);
    assert!((a.factual_mse - b.factual_mse).abs() < 1e-12);
}

#[test]
fn missing_mu_gives_factual_only_report() {
    let ds = data(60, 2, 1.0, 0.5, 10);
    let (tr, va, _) = parts(&ds);
    let (trained, _) = train(&tr, &va, &small(LossKind::Mmd)).unwrap();
    let mut bare = ds;
    bare.mu = None;
    let report = evaluate(&trained, &bare).unwrap();
    assert!(report.pehe.is_none() && report.factual_mse.is_finite());
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let ds = data(60, 2, 1.0, 0.5, 11);
    let (tr, va, _) = parts(&ds);
    let (trained, _) = train(&tr, &va, &small(LossKind::Eb)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    trained.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    assert_eq!(back, trained);
    assert_eq!(back.predict(&ds.x).unwrap(), trained.predict(&ds.x).unwrap());
}

#[test]
fn noiseless_fit_halves_training_loss() {
    for seed in 0..3 {
        let ds = data(200, 2, 1.0, 0.0, 100 + seed);
        let (tr, va, _) = split(&ds, &SplitSpec::with_seed(seed)).unwrap();
        let cfg = TrainConfig { beta: 0.0, seed, max_epochs: 100, patience: 100, ..TrainConfig::default() };
        let cfg = TrainConfig { psi_widths: vec![16, 8], head_widths: vec![8], ..cfg };
        let (_, log) = train(&tr, &va, &cfg).unwrap();
        assert!(
            log.final_train_l1 < 0.5 * log.initial_train_l1,
            "seed {seed}: {} vs {}",
            log.final_train_l1,
            log.initial_train_l1
        );
    }
}

fn sweep_cfg(grids: Vec<usize>, degrees: Vec<usize>, reps: usize, jobs: usize) -> SweepConfig {
    SweepConfig {
        base: small(LossKind::Mmd),
        split: SplitSpec::default(),
        grid_sizes: grids,
        degrees,
        repetitions: reps,
        base_seed: 5,
        jobs,
    }
}

#[test]
fn single_cell_sweep_is_train_then_evaluate() {
    let ds = data(80, 2, 1.0, 0.5, 12);
    let table = sweep(&ds, &sweep_cfg(vec![4], vec![2], 1, 1)).unwrap();
    let cfg = TrainConfig { grid_size: 4, degree: 2, seed: 5, ..small(LossKind::Mmd) };
    let (tr, va, _) = split(&ds, &SplitSpec::with_seed(5)).unwrap();
    let (trained, log) = train(&tr, &va, &cfg).unwrap();
    let report = evaluate(&trained, &ds).unwrap();
    let run = &table.runs[0];
    assert_eq!((run.pehe, run.ate, run.epochs), (report.pehe, report.ate_error, log.best_epoch));
    assert_eq!(table.cells[0].pehe_mean, report.pehe.unwrap());
    assert_eq!(run.params, count_parameters(&trained.model));
}

#[test]
fn sweep_cells_aggregate_their_runs() {
    let ds = data(80, 2, 1.0, 0.5, 13);
    let cfg = sweep_cfg(vec![3, 5], vec![1, 2], 3, 1);
    let table = sweep(&ds, &cfg).unwrap();
    assert_eq!(table.cells.len(), 4);
    assert_eq!(table.runs.len(), 12);
    for cell in &table.cells {
        let v: Vec<f64> = table
            .runs
            .iter()
            .filter(|r| r.grid == cell.grid && r.degree == cell.degree)
            .map(|r| r.pehe.unwrap())
            .collect();
        assert_eq!(v.len(), 3);
        let m = (v[0] + v[1] + v[2]) / 3.0;
        let s = (((v[0] - m).powi(2) + (v[1] - m).powi(2) + (v[2] - m).powi(2)) / 2.0).sqrt();
        assert!((cell.pehe_mean - m).abs() < 1e-12 && (cell.pehe_std - s).abs() < 1e-12);
        let expected: usize = [(3, 4), (4, 3)]
            .iter()
            .map(|(a, b)| a * b * (cell.grid + cell.degree + 2))
            .sum::<usize>()
            + 2 * (3 * 3 + 3) * (cell.grid + cell.degree + 2);
        assert_eq!(cell.params, expected);
        assert_eq!(cell.status, CellStatus::Complete);
    }
    let seeds: Vec<u64> = table.runs.iter().take(3).map(|r| r.seed).collect();
    assert_eq!(seeds, vec![5, 6, 7]);
}

#[test]
fn parallel_sweep_matches_serial() {
    let ds = data(80, 2, 1.0, 0.5, 14);
    let strip = |t: SweepTable| t.runs.into_iter().map(|r| (r.grid, r.degree, r.seed, r.pehe, r.ate, r.epochs)).collect::<Vec<_>>();
    let a = strip(sweep(&ds, &sweep_cfg(vec![3, 4], vec![2], 2, 1)).unwrap());
    let b = strip(sweep(&ds, &sweep_cfg(vec![3, 4], vec![2], 2, 3)).unwrap());
    assert_eq!(a, b);
}

#[test]
fn sweep_csv_schema() {
    let ds = data(60, 2, 1.0, 0.5, 15);
    let table = sweep(&ds, &sweep_cfg(vec![3], vec![1, 2], 1, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sweep_csvs(&table, 5, dir.path()).unwrap();
    write_params_csv(&small(LossKind::Mmd), 3, 2, &[3], &[1, 2], dir.path().join("params.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("grid,degree,seed,pehe,ate,params,epochs,wall_s"));
    assert_eq!(lines.count(), 2);
    let params = std::fs::read_to_string(dir.path().join("params.csv")).unwrap();
    assert_eq!(params.lines().count(), 3);
}

#[test]
fn empty_sweep_lists_rejected() {
    let ds = data(60, 2, 1.0, 0.5, 16);
    assert!(sweep(&ds, &sweep_cfg(vec![], vec![2], 1, 1)).is_err());
    assert!(sweep(&ds, &sweep_cfg(vec![3], vec![2], 0, 1)).is_err());
}

#[test]
fn full_objectives_match_finite_differences() {
    use crate::autodiff::gradcheck::{check_gradients, max_relative_error};
    let ds = data(40, 3, 1.0, 0.5, 17);
    let rows: Vec<usize> = (0..8).collect();
    let x = ds.x.select_rows(&rows);
    let t: Vec<usize> = rows.iter().map(|&i| ds.t[i]).collect();
    let y: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
    for loss in [LossKind::Mmd, LossKind::Wass, LossKind::Eb] {
        let cfg = TrainConfig { psi_widths: vec![3, 2], head_widths: vec![], sinkhorn_iters: 10, ..small(loss) };
        let model = KaniteModel::init(&cfg.architecture(3, 3), &ds.x, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let frozen = {
            let tape = Tape::new();
            objective(&model.bind(&tape), tape.constant(x.clone()), &t, &y, &cfg, None).unwrap().frozen
        };
        let report = check_gradients(&model.param_tensors(), 1e-5, |v| {
            let bound = model.bind_vars(v)?;
            Ok(objective(&bound, v[0].tape().constant(x.clone()), &t, &y, &cfg, Some(&frozen))?.total)
        })
        .unwrap();
        let err = max_relative_error(&report);
        assert!(err < 1e-4, "{loss}: {err}");
    }
}

#[test]
fn frozen_terms_reproduce_the_objective() {
    let ds = data(40, 3, 1.0, 0.5, 18);
    for loss in [LossKind::Wass, LossKind::Eb] {
        let cfg = small(loss);
        let model = KaniteModel::init(&cfg.architecture(3, 3), &ds.x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let first = objective(&bound, tape.constant(ds.x.clone()), &ds.t, &ds.y, &cfg, None).unwrap();
        let again = objective(&bound, tape.constant(ds.x.clone()), &ds.t, &ds.y, &cfg, Some(&first.frozen)).unwrap();
        assert_eq!(first.total.item(), again.total.item());
        assert!(!first.frozen.epsilons.is_empty() || first.frozen.dual.is_some());
    }
}
