//! Command implementations. Every command reads its inputs from the output
//! tree of the previous step, so each can be re-run on its own.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use factorformer::dataio::{self, apply_split, in_recession, load_recessions, transform, SplitSpec};
use factorformer::dgp::{load_dataset, save_dataset, SimulatedDataset};
use factorformer::eval::{self, format_mean_sd, MetricsReport};
use factorformer::interpret::{self, AttentionRecord};
use factorformer::mat::Mat;
use factorformer::net::{self, load_checkpoint, save_checkpoint, ForwardTrace, Hyperparams, Mode, TransformerParams};
use factorformer::train::{self, ensemble_csv, factor_csv, Ensemble, TrainData};
use factorformer::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ExperimentConfig, Mode as RunMode};
use crate::pipeline::{self, write_atomic, Baselines};

/// A resolved configuration plus the invocation's execution settings.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub jobs: usize,
    pub allow_network: bool,
}

impl Context {
    fn seed_dir(&self, seed: u64) -> PathBuf {
        pipeline::seed_dir(&self.cfg.out, self.cfg.process, seed)
    }

    fn require_simulate(&self, cmd: &str) -> Result<()> {
        if self.cfg.mode != RunMode::Simulate {
            return Err(Error::Config(format!("`{cmd}` needs mode = simulate (use `coincident` for empirical data)")));
        }
        Ok(())
    }

    /// Runs `f` once per seed on at most `jobs` threads, in seed order.
    fn per_seed<T: Send>(&self, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| self.cfg.seeds.par_iter().map(|&s| f(s)).collect())
    }

    /// Records what produced the output tree next to it.
    pub fn write_manifest(&self, command: &str) -> Result<PathBuf> {
        let m = json!({
            "command": command,
            "config_hash": self.cfg.raw.hash(),
            "config": self.cfg.raw.values,
            "seeds": self.cfg.seeds,
            "lambdas": self.cfg.lambdas,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let path = self.cfg.out.join(format!("{command}.manifest.json"));
        write_atomic(&path, &(serde_json::to_string_pretty(&m)? + "\n"))?;
        Ok(path)
    }
}

fn load_ds(dir: &Path) -> Result<SimulatedDataset> {
    pipeline::require_file(&dir.join("dataset.json"), "dataset")?;
    load_dataset(dir)
}

pub fn cmd_simulate(ctx: &Context) -> Result<Vec<PathBuf>> {
    ctx.require_simulate("simulate")?;
    let dirs = ctx.per_seed(|seed| {
        let ds = pipeline::simulate_seed(&ctx.cfg, seed)?;
        let dir = ctx.seed_dir(seed);
        let tmp = dir.join(".dataset.tmp");
        save_dataset(&ds, &tmp)?;
        for f in ["dataset.csv", "dataset.json"] {
            fs::rename(tmp.join(f), dir.join(f))?;
        }
        fs::remove_dir(&tmp)?;
        Ok(dir)
    })?;
    ctx.write_manifest("simulate")?;
    Ok(dirs)
}

pub fn cmd_baselines(ctx: &Context) -> Result<Vec<PathBuf>> {
    ctx.require_simulate("baselines")?;
    let files = ctx.per_seed(|seed| {
        let dir = ctx.seed_dir(seed);
        let ds = load_ds(&dir)?;
        let b = pipeline::compute_baselines(&ds, ctx.cfg.n_particles)?;
        if let Some(mle) = &b.mle {
            let tmp = dir.join("kalman_params.txt.tmp");
            mle.save(&tmp)?;
            fs::rename(&tmp, dir.join("kalman_params.txt"))?;
        }
        let path = dir.join("baselines.csv");
        write_atomic(&path, &pipeline::baselines_csv(&b))?;
        Ok(path)
    })?;
    ctx.write_manifest("baselines")?;
    Ok(files)
}

fn runs_json(e: &Ensemble) -> serde_json::Value {
    let runs: Vec<_> = e
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            json!({
                "run": i + 1,
                "seed": r.seed,
                "best_epoch": r.history.best_epoch,
                "best_val_loss": r.history.best_val_loss(),
                "epochs": r.history.epochs.len(),
                "stop_reason": r.history.stop_reason,
            })
        })
        .collect();
    serde_json::Value::Array(runs)
}

/// Checkpoints, histories and factor series of every run plus the ensemble
/// files, under `dir`.
pub fn write_ensemble(dir: &Path, hyper: &Hyperparams, e: &Ensemble) -> Result<()> {
    for (i, (r, f)) in e.runs.iter().zip(&e.factors).enumerate() {
        let rd = dir.join(format!("run{}", i + 1));
        fs::create_dir_all(&rd)?;
        save_checkpoint(&rd.join("checkpoint.txt"), hyper, &r.params)?;
        write_atomic(&rd.join("history.csv"), &r.history.to_csv())?;
        write_atomic(&rd.join("factor.csv"), &factor_csv(f))?;
    }
    write_atomic(&dir.join("factor_mean.csv"), &ensemble_csv(e))?;
    if let Some(m) = &e.mean_best_test {
        write_atomic(&dir.join("factor_best_test.csv"), &factor_csv(m))?;
    }
    write_atomic(&dir.join("runs.json"), &(serde_json::to_string_pretty(&runs_json(e))? + "\n"))
}

pub fn cmd_train(ctx: &Context) -> Result<Vec<PathBuf>> {
    ctx.require_simulate("train")?;
    let mut dirs = Vec::new();
    // runs are already spread over the thread budget, so seeds go in turn
    for &seed in &ctx.cfg.seeds {
        let sd = ctx.seed_dir(seed);
        let ds = load_ds(&sd)?;
        pipeline::require_file(&sd.join("baselines.csv"), "baselines")?;
        let b = pipeline::load_baselines(&sd.join("baselines.csv"))?;
        let hyper = ctx.cfg.hyper_for(ds.k())?;
        for &lambda in &ctx.cfg.lambdas {
            let mut tc = ctx.cfg.train_for(lambda);
            tc.seed = tc.seed.wrapping_add(seed);
            let e = pipeline::train_simulated(&ds, &b.kalman, &hyper, &tc, ctx.jobs, ctx.cfg.track_test_fit)?;
            let dir = pipeline::lambda_dir(&sd, lambda);
            write_ensemble(&dir, &hyper, &e)?;
            dirs.push(dir);
        }
    }
    ctx.write_manifest("train")?;
    Ok(dirs)
}

fn mean_val_loss(dir: &Path) -> Result<Option<f64>> {
    let path = dir.join("runs.json");
    if !path.is_file() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let losses: Vec<f64> = v
        .as_array()
        .map(|a| a.iter().filter_map(|r| r["best_val_loss"].as_f64()).collect())
        .unwrap_or_default();
    Ok((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Index (0-based) of the run with the lowest best validation loss.
fn best_run(dir: &Path) -> Result<usize> {
    let path = dir.join("runs.json");
    pipeline::require_file(&path, "run summary")?;
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let runs = v.as_array().ok_or_else(|| Error::Parse { path: path.clone(), detail: "expected an array".into() })?;
    runs.iter()
        .enumerate()
        .filter_map(|(i, r)| r["best_val_loss"].as_f64().map(|l| (i, l)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Parse { path, detail: "no runs recorded".into() })
}

/// Metrics of one trained ensemble, written to `metrics.json` in its directory.
pub fn evaluate_one(ctx: &Context, seed: u64, lambda: f64) -> Result<MetricsReport> {
    let sd = ctx.seed_dir(seed);
    let ds = load_ds(&sd)?;
    let b: Baselines = pipeline::load_baselines(&sd.join("baselines.csv"))?;
    let dir = pipeline::lambda_dir(&sd, lambda);
    let mean_path = dir.join("factor_mean.csv");
    pipeline::require_file(&mean_path, "ensemble factor")?;
    let x = train::read_factor_csv(&mean_path, "x_mean")?;
    let best_path = dir.join("factor_best_test.csv");
    let x_max = if best_path.is_file() { Some(train::read_factor_csv(&best_path, "x_hat")?) } else { None };
    let hyper = ctx.cfg.hyper_for(ds.k())?;
    let report = pipeline::evaluate_simulated(&ds, &b, &hyper, &x, x_max.as_deref(), mean_val_loss(&dir)?)?;
    write_atomic(&dir.join("metrics.json"), &(serde_json::to_string_pretty(&report.to_json())? + "\n"))?;
    Ok(report)
}

/// Seed-averaged table with `m (sd)` cells; discarded seeds are excluded
/// from the averages and counted.
pub fn results_table(lambdas: &[f64], reports: &[(u64, f64, MetricsReport)]) -> String {
    let mut s = String::from("lambda,seeds,discarded,fit,fit_max,gain,r2_transformer,r2_kalman,corr,val_loss\n");
    for &l in lambdas {
        let all: Vec<&MetricsReport> = reports.iter().filter(|r| r.1 == l).map(|r| &r.2).collect();
        let kept: Vec<&&MetricsReport> = all.iter().filter(|r| !r.discarded).collect();
        let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = kept.iter().filter_map(|r| f(r)).collect();
            format_mean_sd(&v)
        };
        let _ = writeln!(
            s,
            "{l},{},{},{},{},{},{},{},{},{}",
            kept.len(),
            all.len() - kept.len(),
            col(&|r| Some(r.fit)),
            col(&|r| r.fit_max),
            col(&|r| r.gain),
            col(&|r| r.r2.get("transformer").map(|v| 100.0 * v)),
            col(&|r| r.r2.get("kalman").map(|v| 100.0 * v)),
            col(&|r| Some(100.0 * r.corr)),
            col(&|r| r.val_loss),
        );
    }
    s
}

pub fn cmd_evaluate(ctx: &Context) -> Result<Vec<PathBuf>> {
    ctx.require_simulate("evaluate")?;
    let per_seed = ctx.per_seed(|seed| {
        ctx.cfg.lambdas.iter().map(|&l| Ok((seed, l, evaluate_one(ctx, seed, l)?))).collect::<Result<Vec<_>>>()
    })?;
    let reports: Vec<_> = per_seed.into_iter().flatten().collect();
    let path = ctx.cfg.out.join(format!("process{}", ctx.cfg.process)).join("results.csv");
    write_atomic(&path, &results_table(&ctx.cfg.lambdas, &reports))?;
    ctx.write_manifest("evaluate")?;
    Ok(vec![path])
}

/// `head,lag,var_1..` rows of each head's last-query state scores.
fn per_head_csv(trace: &ForwardTrace, hyper: &Hyperparams) -> String {
    let mut s = String::from("head,lag");
    for i in 1..=hyper.k {
        let _ = write!(s, ",var_{i}");
    }
    s.push('\n');
    for (h, sc) in trace.state_scores().iter().enumerate() {
        let last = sc.row(sc.rows() - 1);
        for j in 0..hyper.p {
            let r = hyper.p - 1 - j;
            let _ = write!(s, "{},lag_{}", h + 1, j + 1);
            for v in &last[r * hyper.k..(r + 1) * hyper.k] {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

fn smoothed_vars_csv(records: &[AttentionRecord], alpha: f64) -> Result<String> {
    let (vars, _, _) = interpret::contribution_series(records);
    let mut sm = Mat::zeros(vars.rows(), vars.cols());
    for c in 0..vars.cols() {
        for (t, v) in interpret::smooth(&vars.col(c), alpha, true)?.into_iter().enumerate() {
            sm.set(t, c, v);
        }
    }
    let ts: Vec<usize> = records.iter().map(|r| r.t).collect();
    Ok(interpret::series_csv(&ts, &sm, "var", false))
}

/// Attention, residual-stream and projection files for one network over
/// periods `span` of `series`, written to `dir`.
pub fn write_interpretation(
    ctx: &Context,
    dir: &Path,
    params: &TransformerParams,
    hyper: &Hyperparams,
    series: &Mat,
    span: std::ops::Range<usize>,
) -> Result<()> {
    if span.is_empty() {
        return Err(Error::Config("interpretation span is empty".into()));
    }
    let records = interpret::attention_records(params, hyper, series, span.clone())?;
    let last = records.last().expect("non-empty span");
    write_atomic(&dir.join("attn_state_snapshot.csv"), &interpret::attn_snapshot_csv(&last.state_matrix))?;
    write_atomic(&dir.join("attn_measure_snapshot.csv"), &interpret::attn_snapshot_csv(&last.measurement_matrix))?;
    write_atomic(&dir.join("attn_vars.csv"), &interpret::attn_vars_csv(&records))?;
    write_atomic(&dir.join("attn_vars_smoothed.csv"), &smoothed_vars_csv(&records, ctx.cfg.smooth_alpha)?)?;
    write_atomic(&dir.join("attn_lags_state.csv"), &interpret::attn_lags_csv(&records, false))?;
    write_atomic(&dir.join("attn_lags_measure.csv"), &interpret::attn_lags_csv(&records, true))?;
    let w = interpret::window_at(series, hyper.p, span.end - 1)?;
    let trace = net::forward(&w, params, hyper, Mode::Infer)?;
    write_atomic(&dir.join("residual_stream.csv"), &interpret::residual_stream_csv(&interpret::residual_probe(&trace, params)))?;
    if ctx.cfg.attention_per_head {
        write_atomic(&dir.join("attn_state_heads.csv"), &per_head_csv(&trace, hyper))?;
    }
    let tentacles = span
        .clone()
        .step_by(ctx.cfg.tentacle_stride)
        .map(|t| interpret::project(params, hyper, series, t, ctx.cfg.tentacle_steps))
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&dir.join("tentacles.csv"), &interpret::tentacles_csv(&tentacles, hyper.k))
}

pub fn cmd_interpret(ctx: &Context) -> Result<Vec<PathBuf>> {
    ctx.require_simulate("interpret")?;
    let dirs = ctx.per_seed(|seed| {
        let sd = ctx.seed_dir(seed);
        let ds = load_ds(&sd)?;
        ctx.cfg
            .lambdas
            .iter()
            .map(|&l| {
                let ld = pipeline::lambda_dir(&sd, l);
                let i = best_run(&ld)?;
                let (hyper, params) = load_checkpoint(&ld.join(format!("run{}", i + 1)).join("checkpoint.txt"))?;
                let out = ld.join("interpret");
                write_interpretation(ctx, &out, &params, &hyper, &ds.y, ds.splits.test.clone())?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    ctx.write_manifest("interpret")?;
    Ok(dirs.into_iter().flatten().collect())
}

/// Coincident index from the configured macro series: Kalman baseline,
/// transformer ensemble, the baseline-scaled comparison, recession flags and
/// attention artifacts.
pub fn cmd_coincident(ctx: &Context) -> Result<Vec<PathBuf>> {
    if ctx.cfg.mode != RunMode::Empirical {
        return Err(Error::Config("`coincident` needs mode = empirical".into()));
    }
    let series = ctx.cfg.data.iter().map(|p| dataio::load_csv(p)).collect::<Result<Vec<_>>>()?;
    let tr = transform(&series)?;
    let split_path = ctx.cfg.split.as_ref().expect("validated in config");
    let masks = apply_split(&tr.dates, &SplitSpec::load(split_path)?)?;
    let bands = match &ctx.cfg.recessions {
        Some(p) => load_recessions(p)?,
        None => Vec::new(),
    };
    let out = ctx.cfg.out.join("coincident");
    let n = tr.y.rows();
    let k = tr.y.cols();

    let mut data = String::from("date");
    for name in &tr.names {
        let _ = write!(data, ",{name}");
    }
    data.push_str(",segment\n");
    for t in 0..n {
        let _ = write!(data, "{}", tr.dates[t]);
        for v in tr.y.row(t) {
            let _ = write!(data, ",{v}");
        }
        let seg = match masks.label_of(t) {
            Some(dataio::SegmentLabel::Train) => "train",
            Some(dataio::SegmentLabel::Validation) => "validation",
            None => "",
        };
        let _ = writeln!(data, ",{seg}");
    }
    write_atomic(&out.join("data.csv"), &data)?;

    let (mle, kalman) = pipeline::kalman_prior(&tr.y, 0..n)?;
    let tmp = out.join("kalman_params.txt.tmp");
    mle.save(&tmp)?;
    fs::rename(&tmp, out.join("kalman_params.txt"))?;

    let hyper = ctx.cfg.hyper_for(k)?;
    let tc = ctx.cfg.train_for(ctx.cfg.lambdas[0]);
    let td = TrainData { series: tr.y.clone(), prior: kalman.clone(), train: masks.train.clone(), val: masks.val.clone() };
    let e = train::train_ensemble(&td, &hyper, &tc, ctx.jobs, None)?;
    write_ensemble(&out, &hyper, &e)?;

    // the ensemble is mapped onto the baseline's scale where both exist
    let span = hyper.p - 1..n;
    let scaling = eval::fit_scaling(&e.mean, &kalman, span)?;
    let scaled = scaling.apply(&e.mean);
    let mut s = String::from("date,x_transformer,x_kalman,recession\n");
    for t in 0..n {
        let x = if scaled[t].is_finite() { scaled[t].to_string() } else { String::new() };
        let _ = writeln!(s, "{},{x},{},{}", tr.dates[t], kalman[t], u8::from(in_recession(tr.dates[t], &bands)));
    }
    write_atomic(&out.join("coincident.csv"), &s)?;
    let mut rb = String::from("start,end\n");
    for (a, b) in &bands {
        let _ = writeln!(rb, "{a},{b}");
    }
    write_atomic(&out.join("recessions.csv"), &rb)?;

    let i = best_run(&out)?;
    write_interpretation(ctx, &out.join("interpret"), &e.runs[i].params, &hyper, &tr.y, hyper.p - 1..n)?;
    ctx.write_manifest("coincident")?;
    Ok(vec![out])
}

pub fn cmd_fetch(ctx: &Context, url: &str, dest: &Path) -> Result<Vec<PathBuf>> {
    dataio::fetch_remote(url, dest, ctx.allow_network)?;
    Ok(vec![dest.to_path_buf()])
}
