use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use clap::Parser;
use factorformer::dgp::load_dataset;
use factorformer::train::read_factor_csv;
use factorformer_cli::{run, Cli};

fn run_args(args: &[&str]) -> factorformer::Result<Vec<PathBuf>> {
    let mut v = vec!["factorformer"];
    v.extend_from_slice(args);
    run(&Cli::try_parse_from(v).unwrap())
}

/// A short Process 1 experiment under `out`.
fn small(cmd: &str, out: &Path, extra: &[&str]) -> factorformer::Result<Vec<PathBuf>> {
    let o = out.to_str().unwrap();
    let mut args = vec![
        cmd, "--preset", "process1", "--set", "n=240", "--set", "runs=1", "--set", "max_epochs=2", "--set", "n_particles=300",
        "--seed", "3", "--out", o,
    ];
    args.extend_from_slice(extra);
    run_args(&args)
}

fn seed_dir(out: &Path) -> PathBuf {
    out.join("process1/seed3")
}

fn rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn simulate_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = small("simulate", dir.path(), &[]).unwrap();
    assert_eq!(out, vec![seed_dir(dir.path())]);
    let csv = rows(&seed_dir(dir.path()).join("dataset.csv"));
    assert_eq!(csv.len(), 241);
    assert!(csv[0].starts_with("t,y1,"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("simulate.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seeds"][0], 3);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(load_dataset(&seed_dir(dir.path())).unwrap().n(), 240);
}

#[test]
fn baselines_need_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let e = small("baselines", dir.path(), &[]).unwrap_err();
    assert_eq!(e.kind(), "data");
}

#[test]
fn baseline_columns() {
    let dir = tempfile::tempdir().unwrap();
    small("simulate", dir.path(), &[]).unwrap();
    small("baselines", dir.path(), &["--set", "n_particles=20000"]).unwrap();
    let sd = seed_dir(dir.path());
    let path = sd.join("baselines.csv");
    assert_eq!(rows(&path)[0], "t,x_kalman,x_kalman_max,x_oracle,x_mean");
    let ds = load_dataset(&sd).unwrap();
    let mean = read_factor_csv(&path, "x_mean").unwrap();
    for t in 0..ds.n() {
        let m = ds.y.row(t).iter().sum::<f64>() / ds.k() as f64;
        assert!((mean[t] - m).abs() < 1e-12);
    }
    // linear Gaussian process: the particle filter reproduces the exact filter
    let k = read_factor_csv(&path, "x_kalman_max").unwrap();
    let o = read_factor_csv(&path, "x_oracle").unwrap();
    let rmse = (k.iter().zip(&o).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / k.len() as f64).sqrt();
    assert!(rmse < 0.05, "rmse {rmse}");
    assert!(sd.join("kalman_params.txt").is_file());
}

#[test]
fn train_evaluate_interpret_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small("simulate", d, &[]).unwrap();
    small("baselines", d, &[]).unwrap();
    let trained = small("train", d, &["--preset", "ablation", "--set", "track_test_fit=true"]).unwrap();
    assert_eq!(trained.len(), 3);
    let sd = seed_dir(d);
    for l in ["lambda0", "lambda0.6", "lambda1"] {
        let ld = sd.join(l);
        assert_eq!(rows(&ld.join("factor_mean.csv"))[0], "t,x_mean,run_1");
        assert_eq!(rows(&ld.join("run1/history.csv")).len(), 3);
        assert!(ld.join("run1/checkpoint.txt").is_file());
        assert!(ld.join("factor_best_test.csv").is_file());
    }

    small("evaluate", d, &["--preset", "ablation"]).unwrap();
    let table = rows(&d.join("process1/results.csv"));
    assert_eq!(table.len(), 4);
    assert!(table[0].starts_with("lambda,seeds,discarded,fit,"));
    let cells: Vec<&str> = table[1].split(',').collect();
    assert!(cells[3].ends_with(" (0.0)"), "{}", cells[3]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(sd.join("lambda0.6/metrics.json")).unwrap()).unwrap();
    for key in ["fit", "fit_max", "gain", "corr", "r2_transformer", "mse_oracle", "discarded"] {
        assert!(m.get(key).is_some(), "missing {key}");
    }

    small("interpret", d, &[]).unwrap();
    let ip = sd.join("lambda0.6/interpret");
    assert_eq!(rows(&ip.join("attn_state_snapshot.csv")).len(), 10);
    assert_eq!(rows(&ip.join("residual_stream.csv"))[0], "lag,Embed,Norm1,Attn,Norm2,FFN");
    let test_len = load_dataset(&sd).unwrap().splits.test.len();
    assert_eq!(rows(&ip.join("attn_vars.csv")).len(), test_len + 1);
    assert_eq!(rows(&ip.join("tentacles.csv")).len(), 1 + test_len.div_ceil(10) * 20);
}

#[test]
fn evaluating_the_truth_gives_full_fit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small("simulate", d, &[]).unwrap();
    small("baselines", d, &[]).unwrap();
    let sd = seed_dir(d);
    let ds = load_dataset(&sd).unwrap();
    let mut csv = String::from("t,x_mean\n");
    for (t, x) in ds.x_true.iter().enumerate() {
        csv.push_str(&format!("{t},{x}\n"));
    }
    fs::create_dir_all(sd.join("lambda0.6")).unwrap();
    fs::write(sd.join("lambda0.6/factor_mean.csv"), csv).unwrap();
    small("evaluate", d, &[]).unwrap();
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(sd.join("lambda0.6/metrics.json")).unwrap()).unwrap();
    assert!((m["fit"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(m["discarded"], false);
}

#[test]
fn results_table_excludes_discarded_seeds() {
    use factorformer::eval::MetricsReport;
    let report = |fit: f64, discarded: bool| MetricsReport {
        mse: Default::default(),
        r2: Default::default(),
        fit,
        fit_max: None,
        gain: None,
        corr: 0.9,
        val_loss: None,
        discarded,
    };
    let t = factorformer_cli::commands::results_table(&[0.6], &[(1, 0.6, report(30.0, false)), (2, 0.6, report(50.0, false)), (3, 0.6, report(-900.0, true))]);
    let row: Vec<&str> = t.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..4], &["0.6", "2", "1", "40.0 (14.1)"]);
    assert_eq!(row[4], "-");
}

#[test]
fn empirical_mode_is_checked_per_command() {
    let dir = tempfile::tempdir().unwrap();
    let e = run_args(&["coincident", "--preset", "process1", "--out", dir.path().to_str().unwrap()]).unwrap_err();
    assert_eq!(e.kind(), "config");
    let e = run_args(&["train", "--set", "lambda=2", "--out", dir.path().to_str().unwrap()]).unwrap_err();
    assert_eq!(e.kind(), "config");
}

#[test]
fn coincident_flags_recessions() {
    let dir = tempfile::tempdir().unwrap();
    let f = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures");
    let cfg = dir.path().join("c.cfg");
    let fx = f.display();
    fs::write(
        &cfg,
        format!(
            "include = empirical\ndata = {fx}/indpro.csv, {fx}/payems.csv, {fx}/w875rx1.csv, {fx}/cmrmtspl.csv\n\
             split = {fx}/split.csv\nrecessions = {fx}/recessions.csv\nruns = 1\nmax_epochs = 1\ntentacle_steps = 2\n"
        ),
    )
    .unwrap();
    run_args(&["coincident", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]).unwrap();
    let c = dir.path().join("o/coincident");
    let bands = factorformer::dataio::load_recessions(&f.join("recessions.csv")).unwrap();
    for line in rows(&c.join("coincident.csv")).iter().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let d: factorformer::dataio::Month = cells[0].parse().unwrap();
        assert_eq!(cells[3] == "1", factorformer::dataio::in_recession(d, &bands), "{line}");
    }
    assert_eq!(rows(&c.join("recessions.csv")).len(), bands.len() + 1);
    // early periods have no full window, hence no transformer estimate
    assert!(rows(&c.join("coincident.csv"))[1].split(',').nth(1) == Some(""));
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = Proc::new(env!("CARGO_BIN_EXE_factorformer"))
        .args(["train", "--set", "colour=blue", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("colour"));

    let out = Proc::new(env!("CARGO_BIN_EXE_factorformer")).arg("presets").output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["outputs"].as_array().unwrap().iter().any(|p| p == "empirical"));
}

#[test]
fn fetch_needs_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("x.csv");
    let e = run_args(&["fetch", "http://127.0.0.1:9/x.csv", "--dest", dest.to_str().unwrap()]).unwrap_err();
    assert_eq!(e.kind(), "config");
    assert!(!dest.exists());
}
