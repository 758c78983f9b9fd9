use std::path::{Path, PathBuf};

use kanite::data::{generate_synthetic, load_csv, split, write_csv, write_meta, ObservationalDataset};
use kanite::metrics::EvaluationReport;
use kanite::trainer::{evaluate, sweep, train, write_params_csv, write_sweep_csvs, RunLog, TrainConfig};
use serde_json::json;

use crate::config::{GenFlags, SweepFlags, TrainFlags};
use crate::error::{CliError, CliResult};

pub fn gen(flags: &GenFlags, out: &Path) -> CliResult<()> {
    let cfg = flags.resolve();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = generate_synthetic(&cfg).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::output(&dir.display().to_string(), e))?;
    }
    write_csv(&ds, out).map_err(|e| CliError::output(&out.display().to_string(), e))?;
    let meta = write_meta(&cfg, out).map_err(|e| CliError::output("metadata", e))?;
    println!("wrote {} rows to {} ({})", ds.n(), out.display(), meta.display());
    Ok(())
}

/// Loads `--data` or generates from the generator flags; exactly one
/// source must be given.
fn dataset(train: &TrainFlags, gen: &GenFlags) -> CliResult<ObservationalDataset> {
    match (&train.data, gen.is_empty()) {
        (Some(_), false) => Err(CliError::Usage("give either --data or generator flags, not both".into())),
        (None, true) => Err(CliError::Usage("no dataset: pass --data <csv> or generator flags such as --n".into())),
        (Some(path), true) => {
            if !path.is_file() {
                return Err(CliError::Usage(format!("data file not found: {}", path.display())));
            }
            load_csv(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        }
        (None, false) => {
            let cfg = gen.resolve();
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            generate_synthetic(&cfg).map_err(|e| CliError::Data(e.to_string()))
        }
    }
}

fn out_dir(flags: &TrainFlags, fallback: &str) -> CliResult<PathBuf> {
    let dir = flags.out.clone().unwrap_or_else(|| PathBuf::from(fallback));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::output(&dir.display().to_string(), e))?;
    Ok(dir)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn print_table(cfg: &TrainConfig, rows: &[(&str, &EvaluationReport)]) {
    let method = format!("KANITE-{}", cfg.loss.to_string().to_uppercase());
    println!("{:<14} {:<6} {:>12} {:>12} {:>12}", "method", "set", "eps_PEHE", "eps_ATE", "factual_MSE");
    for (name, r) in rows {
        println!(
            "{:<14} {:<6} {:>12} {:>12} {:>12.4}",
            method,
            name,
            fmt_metric(r.pehe),
            fmt_metric(r.ate_error),
            r.factual_mse
        );
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::output("json", e))? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::output(&path.display().to_string(), e))
}

fn write_log(dir: &Path, log: &RunLog) -> CliResult<()> {
    let path = dir.join("runlog.jsonl");
    log.write_jsonl(&path).map_err(|e| CliError::output(&path.display().to_string(), e))
}

pub fn train_cmd(flags: &TrainFlags, gen: &GenFlags) -> CliResult<()> {
    let (cfg, spec) = flags.resolve()?;
    let ds = dataset(flags, gen)?;
    let dir = out_dir(flags, "kanite-out")?;
    let (tr, va, te) = split(&ds, &spec).map_err(CliError::data)?;
    let (trained, log) = match train(&tr, &va, &cfg) {
        Ok(r) => r,
        Err(kanite::Error::TrainingAborted(abort)) => {
            let model_path = dir.join("model.json");
            abort.last_good.save(&model_path).map_err(|e| CliError::output("model.json", e))?;
            write_log(&dir, &abort.log)?;
            return Err(CliError::Training(format!(
                "training aborted at epoch {}: {} became non-finite ({}); last good model saved to {}",
                abort.epoch,
                abort.term,
                abort.detail,
                model_path.display()
            )));
        }
        Err(e) => return Err(CliError::training(e)),
    };
    trained.save(dir.join("model.json")).map_err(|e| CliError::output("model.json", e))?;
    write_log(&dir, &log)?;

    let full = evaluate(&trained, &ds).map_err(CliError::training)?;
    let test = if te.n() > 0 { Some(evaluate(&trained, &te).map_err(CliError::training)?) } else { None };
    let mut report = full.to_json();
    report["test"] = test.as_ref().map_or(serde_json::Value::Null, EvaluationReport::to_json);
    report["run"] = log.summary_json();
    report["split"] = json!({ "train": tr.n(), "val": va.n(), "test": te.n(), "seed": spec.seed });
    report["config"] = serde_json::to_value(&cfg).map_err(|e| CliError::output("config", e))?;
    write_json(&dir.join("report.json"), &report)?;

    let mut rows = vec![("full", &full)];
    if let Some(t) = &test {
        rows.push(("test", t));
    }
    print_table(&cfg, &rows);
    println!("best epoch {} of {}; artifacts in {}", log.best_epoch, log.epochs.len(), dir.display());
    Ok(())
}

pub fn sweep_cmd(flags: &TrainFlags, gen: &GenFlags, axes: &SweepFlags) -> CliResult<()> {
    let (base, spec) = flags.resolve()?;
    let cfg = axes.resolve(base, spec)?;
    let ds = dataset(flags, gen)?;
    let dir = out_dir(flags, "kanite-sweep")?;
    write_params_csv(&cfg.base, ds.n0(), ds.k(), &cfg.grid_sizes, &cfg.degrees, dir.join("params.csv"))
        .map_err(|e| CliError::output("params.csv", e))?;
    let table = sweep(&ds, &cfg).map_err(CliError::training)?;
    write_sweep_csvs(&table, cfg.base_seed, &dir).map_err(|e| CliError::output("sweep.csv", e))?;

    println!("{:>5} {:>6} {:>20} {:>20} {:>8} {:>8}", "grid", "degree", "eps_PEHE", "eps_ATE", "params", "status");
    for c in &table.cells {
        println!(
            "{:>5} {:>6} {:>20} {:>20} {:>8} {:>8?}",
            c.grid,
            c.degree,
            format!("{:.4} +- {:.4}", c.pehe_mean, c.pehe_std),
            format!("{:.4} +- {:.4}", c.ate_mean, c.ate_std),
            c.params,
            c.status
        );
    }
    if table.all_failed() {
        let first = table.runs.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(CliError::SweepFailed(format!("every sweep run failed; first error: {first}")));
    }
    Ok(())
}
