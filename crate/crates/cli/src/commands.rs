use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cfdist::dataset::{fmt_f64, Dataset};
use cfdist::dgp::{derive_seed, gen_observational};
use cfdist::diagnostics::{conditional_independence_check, first_stage_report, DiagnosticReport, Verdict};
use cfdist::pipeline::{cross_fit_controls, stage_u1, InterventionalCdf};
use cfdist::Execution;
use serde::Serialize;
use serde_json::json;

use crate::benchmark::{run_benchmark, write_outputs, BenchmarkResult};
use crate::config::{Estimator, RunConfig, Source};
use crate::engine::{
    fit_tabcf, linear_cf_means, naive_curves, naive_joint, outcome_grids, summarize, tabcf_curves, tabcf_joint,
    CurveSummaries, JointEstimate, Stopwatch,
};
use crate::error::{AtStage, CliError, CliResult, Stage};

fn exec() -> Execution {
    Execution::Parallel
}

/// File-name-safe form of a setting label.
pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') { c } else { '_' })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `manifest.json`: the resolved configuration, produced files and a
/// creation timestamp (the only field that differs between reruns).
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, files: &[String], extra: serde_json::Value) -> CliResult<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "created_unix": created,
            "config": cfg,
            "files": files,
            "details": extra,
        }),
    )
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Io(std::io::Error::other(e)))
}

fn put<W: std::io::Write>(w: &mut csv::Writer<W>, record: &[String]) -> CliResult<()> {
    w.write_record(record).map_err(|e| CliError::Io(std::io::Error::other(e)))
}

pub struct SimulateSummary {
    pub files: Vec<PathBuf>,
}

/// One observational CSV per (setting, replication) under `data/`.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<SimulateSummary> {
    if cfg.settings.is_empty() {
        return Err(CliError::Config("simulate needs at least one setting".into()));
    }
    let data_dir = cfg.output.join("data");
    std::fs::create_dir_all(&data_dir)?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for setting in &cfg.settings {
        for (r, seed) in cfg.replication_seeds().into_iter().enumerate() {
            let ds = gen_observational(setting, cfg.n, derive_seed(seed, 0)).at(Stage::Data)?;
            let name = format!("{}-rep{r}.csv", slug(&setting.label()));
            let path = data_dir.join(&name);
            ds.save_csv(&path).at(Stage::Output)?;
            entries.push(json!({
                "setting": setting,
                "label": setting.label(),
                "replication": r,
                "seed": seed,
                "n": cfg.n,
                "file": format!("data/{name}"),
                "roles": ds.roles(),
            }));
            files.push(path);
        }
    }
    let names: Vec<String> = entries.iter().map(|e| e["file"].as_str().unwrap_or_default().to_string()).collect();
    write_manifest(&cfg.output, "simulate", cfg, &names, json!({ "datasets": entries }))?;
    Ok(SimulateSummary { files })
}

/// The dataset of `fit` and `diagnose` plus a description for metadata.
pub fn load_source(cfg: &RunConfig) -> CliResult<(Dataset, serde_json::Value)> {
    match cfg.single_source()? {
        Source::Simulated(setting) => {
            let seed = cfg.replication_seeds()[0];
            let ds = gen_observational(setting, cfg.n, derive_seed(seed, 0)).at(Stage::Data)?;
            Ok((ds, json!({ "setting": setting, "label": setting.label(), "seed": seed })))
        }
        Source::Csv(spec) => {
            let ds = Dataset::load_csv(&spec.path, &spec.roles()).at(Stage::Data)?;
            Ok((ds, json!({ "csv": spec.path, "roles": spec.roles() })))
        }
    }
}

fn write_curves(dir: &Path, x_grid: &[f64], summaries: &[CurveSummaries]) -> CliResult<Vec<String>> {
    let mut files = Vec::new();
    if summaries.iter().any(|s| s.mean.is_some()) {
        let mut w = csv_writer(&dir.join("mean.csv"))?;
        put(&mut w, &["outcome", "x", "value"].map(String::from))?;
        for (k, s) in summaries.iter().enumerate() {
            for (x, v) in x_grid.iter().zip(s.mean.iter().flatten()) {
                put(&mut w, &[(k + 1).to_string(), fmt_f64(*x), fmt_f64(*v)])?;
            }
        }
        w.flush()?;
        files.push("mean.csv".to_string());
    }
    if summaries.iter().any(|s| !s.quantiles.is_empty()) {
        let mut w = csv_writer(&dir.join("quantiles.csv"))?;
        put(&mut w, &["outcome", "tau", "x", "value"].map(String::from))?;
        for (k, s) in summaries.iter().enumerate() {
            for (tau, q) in &s.quantiles {
                for (x, v) in x_grid.iter().zip(q) {
                    put(&mut w, &[(k + 1).to_string(), fmt_f64(*tau), fmt_f64(*x), fmt_f64(*v)])?;
                }
            }
        }
        w.flush()?;
        files.push("quantiles.csv".to_string());
    }
    if summaries.iter().any(|s| s.gini.is_some()) {
        let mut w = csv_writer(&dir.join("gini.csv"))?;
        put(&mut w, &["outcome", "x", "value"].map(String::from))?;
        for (k, s) in summaries.iter().enumerate() {
            for (x, v) in x_grid.iter().zip(s.gini.iter().flatten()) {
                put(&mut w, &[(k + 1).to_string(), fmt_f64(*x), fmt_f64(*v)])?;
            }
        }
        w.flush()?;
        files.push("gini.csv".to_string());
    }
    Ok(files)
}

fn write_joint(dir: &Path, est: &JointEstimate, cfg: &RunConfig, seed: u64) -> CliResult<Vec<String>> {
    let samples = est.sample(cfg.oracle.joint_draws, seed)?;
    let k = est.marginals.len();
    let mut w = csv_writer(&dir.join("joint.csv"))?;
    let mut header = vec!["x".to_string(), "draw".to_string()];
    header.extend((1..=k).map(|j| format!("y{j}")));
    put(&mut w, &header)?;
    for (x, block) in est.marginals[0].x_grid.iter().zip(&samples) {
        for r in 0..block.nrows() {
            let mut rec = vec![fmt_f64(*x), r.to_string()];
            rec.extend((0..k).map(|j| fmt_f64(block[(r, j)])));
            put(&mut w, &rec)?;
        }
    }
    w.flush()?;
    write_json(&dir.join("copula.json"), &est.copula)?;
    Ok(vec!["joint.csv".into(), "copula.json".into()])
}

/// What `fit` produced for one estimator.
#[derive(Debug, Clone, Serialize)]
pub struct FitRecord {
    pub estimator: String,
    pub directory: String,
    pub files: Vec<String>,
}

/// Runs each configured estimator and writes its curves under
/// `<output>/<estimator>/`.
pub fn cmd_fit(cfg: &RunConfig) -> CliResult<Vec<FitRecord>> {
    let (ds, source) = load_source(cfg)?;
    let grids = outcome_grids(&ds, cfg)?;
    let x_grid = grids[0].x_grid.clone();
    let seed = cfg.replication_seeds()[0];
    let joint = cfg.functionals.joint;
    if joint && ds.k() < 2 {
        return Err(CliError::Config("the joint law needs at least two outcomes".into()));
    }
    let mut records = Vec::new();
    for &est in &cfg.estimators {
        let dir = cfg.output.join(est.name());
        std::fs::create_dir_all(&dir)?;
        let mut watch = Stopwatch::default();
        let mut files = Vec::new();
        let mut meta = json!({
            "estimator": est.name(),
            "backbone": if est == Estimator::LinearCf { "ols" } else { cfg.backbone.kind.name() },
            "source": source,
            "n": ds.n(),
            "outcomes": ds.roles().outcomes,
            "x_points": cfg.grid.x_points,
            "y_points": cfg.grid.y_points,
            "trim": cfg.grid.trim,
            "functionals": cfg.functionals,
        });
        match est {
            Estimator::Tabcf => {
                let fit = fit_tabcf(&ds, cfg, derive_seed(seed, 3), exec(), &mut watch)?;
                let curves = tabcf_curves(&fit, &grids, cfg, exec(), &mut watch)?;
                let s = curves.iter().map(|c| summarize(c, cfg, true)).collect::<CliResult<Vec<_>>>()?;
                files.extend(write_curves(&dir, &x_grid, &s)?);
                meta["v_integration"] = json!(cfg.v_integration);
                meta["cross_fit_folds"] = json!(cfg.cross_fit_folds);
                meta["control_source"] = json!(fit.controls.source());
                meta["truncated_rows"] = json!(curves.iter().map(InterventionalCdf::truncated_rows).collect::<Vec<_>>());
                write_json(&dir.join("model.json"), &fit)?;
                files.push("model.json".into());
                if joint {
                    let (gauss, _) = tabcf_joint(&fit, &ds, cfg, exec(), &mut watch)?;
                    files.extend(write_joint(&dir, &gauss, cfg, derive_seed(seed, 4))?);
                }
            }
            Estimator::Naive => {
                let curves = naive_curves(&ds, &grids, cfg, exec(), &mut watch)?;
                let s = curves.iter().map(|c| summarize(c, cfg, true)).collect::<CliResult<Vec<_>>>()?;
                files.extend(write_curves(&dir, &x_grid, &s)?);
                if joint {
                    let est = naive_joint(&ds, cfg, exec(), &mut watch)?;
                    files.extend(write_joint(&dir, &est, cfg, derive_seed(seed, 4))?);
                }
            }
            Estimator::LinearCf => {
                if !cfg.functionals.quantiles.is_empty() || cfg.functionals.gini || joint {
                    log::warn!("linear-cf estimates the mean curve only; other functionals are skipped");
                }
                let means = linear_cf_means(&ds, &grids, &mut watch)?;
                let s: Vec<_> = means
                    .into_iter()
                    .map(|m| CurveSummaries { mean: Some(m), quantiles: Vec::new(), gini: None })
                    .collect();
                files.extend(write_curves(&dir, &x_grid, &s)?);
            }
        }
        meta["files"] = json!(files);
        meta["seconds"] = json!(watch.laps.iter().map(|(_, s, t)| json!({ "stage": s, "seconds": t })).collect::<Vec<_>>());
        write_json(&dir.join("metadata.json"), &meta)?;
        records.push(FitRecord { estimator: est.name().into(), directory: est.name().into(), files });
    }
    let files: Vec<String> = records
        .iter()
        .flat_map(|r| r.files.iter().map(|f| format!("{}/{f}", r.directory)).chain([format!("{}/metadata.json", r.directory)]))
        .collect();
    write_manifest(&cfg.output, "fit", cfg, &files, json!({ "source": source }))?;
    Ok(records)
}

/// First-stage checks, optionally with the stratified conditional check on
/// the first outcome; written to `diagnostics.json`.
pub fn cmd_diagnose(cfg: &RunConfig) -> CliResult<DiagnosticReport> {
    let (ds, source) = load_source(cfg)?;
    let seed = cfg.replication_seeds()[0];
    let (_, full) = stage_u1(&ds, &cfg.backbone).at(Stage::U1)?;
    let v = match cfg.cross_fit_folds {
        0 => full,
        k => cross_fit_controls(&ds, k, &cfg.backbone, derive_seed(seed, 3), exec()).at(Stage::U1)?,
    };
    let d = &cfg.diagnostics;
    let mut report = first_stage_report(&ds, &v, d.permutations, derive_seed(seed, 6), exec()).at(Stage::Diagnostics)?;
    if d.conditional {
        report.conditional = Some(
            conditional_independence_check(&ds, &v, 0, d.bins, d.permutations, derive_seed(seed, 7), exec())
                .at(Stage::Diagnostics)?,
        );
    }
    std::fs::create_dir_all(&cfg.output)?;
    write_json(&cfg.output.join("diagnostics.json"), &report)?;
    write_manifest(&cfg.output, "diagnose", cfg, &["diagnostics.json".into()], json!({ "source": source }))?;
    Ok(report)
}

/// Human-readable lines for a diagnostic report.
pub fn describe(report: &DiagnosticReport) -> Vec<String> {
    let verdict = |v: Verdict| match v {
        Verdict::Pass => "pass",
        Verdict::Warn => "WARN",
    };
    let mut lines = vec![
        format!(
            "PIT uniformity   KS = {:.4} (threshold {:.4})  {}",
            report.ks_statistic,
            report.ks_threshold,
            verdict(report.pit_verdict)
        ),
        format!(
            "V independent Z  dcor = {:.4}, p = {:.3}  {}",
            report.dcor,
            report.dcor_p_value,
            verdict(report.independence_verdict)
        ),
        format!("relevance hint   corr(V, rank X) = {:.3} (near 1: weak instrument)", report.relevance_hint),
    ];
    if let Some(c) = &report.conditional {
        lines.push(format!(
            "Y indep. Z | X,V  {} strata, {} skipped, rejecting {:.2}  {} (approximate)",
            c.strata.len(),
            c.skipped.len(),
            c.rejection_fraction,
            verdict(c.verdict)
        ));
    }
    lines.push(format!("note: {}", report.caveat));
    lines
}

/// Runs the sweep and writes scores, aggregates, timings and failures. A
/// partial failure still writes every file before returning its error.
pub fn cmd_benchmark(cfg: &RunConfig) -> CliResult<BenchmarkResult> {
    let result = run_benchmark(cfg)?;
    let files = write_outputs(&result, &cfg.output)?;
    write_manifest(
        &cfg.output,
        "benchmark",
        cfg,
        &files,
        json!({
            "replications": result.replications,
            "failed_replications": result.failed_replications,
            "failures": result.failures.len(),
        }),
    )?;
    if result.failed_replications > 0 {
        return Err(CliError::Partial { failed: result.failed_replications, total: result.replications });
    }
    Ok(result)
}
