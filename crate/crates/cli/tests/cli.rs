use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--psi-widths", "4,3", "--head-widths", "3", "--max-epochs", "3", "--batch-size", "32"];

fn kanite(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kanite")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_data(dir: &Path, name: &str) {
    let o = kanite(&["gen", "--n", "300", "--k", "3", "--dim", "4", "--seed", "2", "--out", name], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn gen_writes_loadable_csv_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen", "--n", "500", "--k", "4", "--dim", "10", "--gamma", "1.0", "--sigma", "0.5", "--seed", "7", "--out", "d.csv"];
    assert_eq!(code(&kanite(&args, dir.path())), 0);
    let ds = kanite::data::load_csv(dir.path().join("d.csv")).unwrap();
    assert_eq!((ds.n(), ds.n0(), ds.k()), (500, 10, 4));
    assert!(ds.mu.is_some());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "a.csv");
    gen_data(dir.path(), "b.csv");
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
}

#[test]
fn gen_rejects_single_treatment() {
    let dir = tempfile::tempdir().unwrap();
    let o = kanite(&["gen", "--k", "1", "--out", "d.csv"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("d.csv").exists());
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&kanite(&["train", "--frobnicate"], dir.path())), 2);
    assert_eq!(code(&kanite(&["--help"], dir.path())), 0);
}

#[test]
fn train_eb_reports_finite_pehe() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "d.csv");
    let o = kanite(&with_small(&["train", "--data", "d.csv", "--loss", "eb", "--alpha", "1", "--beta", "1", "--seed", "0", "--out", "run"]), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("run");
    for f in ["model.json", "runlog.jsonl", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let r = report(&out);
    assert!(r["pehe"].as_f64().unwrap().is_finite());
    assert!(r["test"]["pehe"].as_f64().unwrap().is_finite());
    assert!(String::from_utf8_lossy(&o.stdout).contains("KANITE-EB"));
    let trained = kanite::trainer::TrainedModel::load(out.join("model.json")).unwrap();
    assert_eq!(trained.model.treatments(), 3);
}

#[test]
fn beta_zero_metrics_match_across_losses() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "d.csv");
    for (loss, out) in [("wass", "w"), ("mmd", "m")] {
        let o = kanite(&with_small(&["train", "--data", "d.csv", "--loss", loss, "--beta", "0", "--seed", "4", "--out", out]), dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (w, m) = (report(&dir.path().join("w")), report(&dir.path().join("m")));
    for key in ["pehe", "ate_error", "factual_mse"] {
        assert_eq!(w[key], m[key], "{key}");
    }
    assert_eq!(
        std::fs::read(dir.path().join("w/runlog.jsonl")).unwrap(),
        std::fs::read(dir.path().join("m/runlog.jsonl")).unwrap()
    );
}

#[test]
fn missing_data_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = kanite(&["train", "--data", "no/such/file.csv"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no/such/file.csv"));
}

#[test]
fn malformed_data_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "x0,t,y\n1.0,1,oops\n2.0,2,1.0\n").unwrap();
    let o = kanite(&["train", "--data", "bad.csv"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("row"));
}

#[test]
fn config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "d.csv");
    let cfg = r#"{"data": "d.csv", "loss": "wass", "max-epochs": 2, "psi-widths": [4, 3], "head-widths": [3], "seed": 1}"#;
    std::fs::write(dir.path().join("c.json"), cfg).unwrap();
    let o = kanite(&["train", "--config", "c.json", "--max-epochs", "3", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&dir.path().join("run"));
    assert_eq!(r["config"]["max_epochs"], 3);
    assert_eq!(r["config"]["loss"], "wass");
    assert_eq!(r["config"]["seed"], 1);

    std::fs::write(dir.path().join("bad.json"), r#"{"bogus": 1}"#).unwrap();
    assert_eq!(code(&kanite(&["train", "--config", "bad.json", "--data", "d.csv"], dir.path())), 2);
}

#[test]
fn training_abort_exits_four_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "d.csv");
    let o = kanite(
        &with_small(&["train", "--data", "d.csv", "--optimizer", "sgd", "--lr", "1e300", "--out", "run"]),
        dir.path(),
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    assert!(dir.path().join("run/model.json").is_file());
    assert!(dir.path().join("run/runlog.jsonl").is_file());
}

fn sweep_args<'a>(out: &'a str) -> Vec<&'a str> {
    with_small(&["sweep", "--data", "d.csv", "--grids", "3,5", "--degrees", "2,3", "--reps", "2", "--out", out])
}

fn csv_without_wall(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn sweep_emits_four_cells_with_fixed_schema() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "d.csv");
    let o = kanite(&sweep_args("s1"), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("s1/sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "grid,degree,seed,pehe,ate,params,epochs,wall_s");
    assert_eq!(lines.len(), 5);
    let params = std::fs::read_to_string(dir.path().join("s1/params.csv")).unwrap();
    assert_eq!(params.lines().next(), Some("grid,degree,params"));
    for (line, (g, k)) in params.lines().skip(1).zip([(3, 2), (3, 3), (5, 2), (5, 3)]) {
        let expected = (4 * 4 + 4 * 3 + 3 * (3 * 3 + 3)) * (g + k + 2);
        assert_eq!(line, format!("{g},{k},{expected}"));
    }

    let o = kanite(&sweep_args("s2"), dir.path());
    assert_eq!(code(&o), 0);
    for f in ["sweep.csv", "sweep_runs.csv"] {
        assert_eq!(csv_without_wall(&dir.path().join("s1").join(f)), csv_without_wall(&dir.path().join("s2").join(f)));
    }
}

#[test]
fn sweep_with_every_run_failing_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), "d.csv");
    let mut args = with_small(&["sweep", "--data", "d.csv", "--grids", "3", "--degrees", "1", "--reps", "2", "--out", "s"]);
    args.extend(["--optimizer", "sgd", "--lr", "1e300"]);
    let o = kanite(&args, dir.path());
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let stats = std::fs::read_to_string(dir.path().join("s/sweep_stats.csv")).unwrap();
    assert!(stats.lines().nth(1).unwrap().ends_with("failed"));
}
