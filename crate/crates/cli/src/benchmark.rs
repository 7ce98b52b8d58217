//! Replicated simulate, fit, oracle and score sweeps.

use std::collections::HashMap;
use std::path::Path;

use cfdist::dataset::fmt_f64;
use cfdist::dgp::{analytic_oracle, derive_seed, gen_observational, oracle_curve, OracleFunctional, ScmSetting};
use cfdist::metrics::{grid_mse, sliced_wasserstein};
use cfdist::stats::{quantile_type7, sorted_copy};
use cfdist::Execution;
use serde::Serialize;

use crate::config::{Estimator, RunConfig};
use crate::engine::{
    backbone_label, fit_tabcf, linear_cf_means, naive_curves, naive_joint, outcome_grids, summarize, tabcf_curves,
    tabcf_joint, CurveSummaries, JointEstimate, JointMethod, Stopwatch,
};
use crate::error::{AtStage, CliError, CliResult, Stage};

/// Seed offsets within one replication.
const DATA_STREAM: u64 = 0;
const ORACLE_STREAM: u64 = 1;
const JOINT_ORACLE_STREAM: u64 = 2;
const PIPELINE_STREAM: u64 = 3;
const SAMPLING_STREAM: u64 = 4;
const PROJECTION_STREAM: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub setting: String,
    pub method: String,
    pub backbone: String,
    pub n: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub setting: String,
    pub method: String,
    pub backbone: String,
    pub n: usize,
    pub seed: u64,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRow {
    pub setting: String,
    pub method: String,
    pub seed: u64,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub setting: String,
    pub method: String,
    pub backbone: String,
    pub n: usize,
    pub metric: String,
    pub replications: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReplicationResult {
    pub scores: Vec<ScoreRow>,
    pub timings: Vec<TimingRow>,
    pub failures: Vec<FailureRow>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkResult {
    pub replications: usize,
    /// Replications with at least one failed estimator.
    pub failed_replications: usize,
    pub scores: Vec<ScoreRow>,
    pub timings: Vec<TimingRow>,
    pub failures: Vec<FailureRow>,
}

impl BenchmarkResult {
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        aggregate(&self.scores)
    }
}

fn metric_name(base: &str, k: usize, outcomes: usize) -> String {
    if outcomes > 1 { format!("{base}-y{}", k + 1) } else { base.to_string() }
}

/// Mean and quantile oracles on `x_grid`, `[k][g]` and `[k][t][g]`.
type Oracles = (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>);

fn univariate_oracles(
    setting: &ScmSetting,
    x_grid: &[f64],
    taus: &[f64],
    draws: usize,
    seed: u64,
    exec: Execution,
) -> CliResult<Oracles> {
    let quantiles = OracleFunctional::Quantiles { taus: taus.to_vec() };
    if let (Some(m), Some(q)) =
        (analytic_oracle(setting, x_grid, &OracleFunctional::Mean), analytic_oracle(setting, x_grid, &quantiles))
    {
        let mean = (0..setting.k()).map(|k| m.mean(k).unwrap_or_default().to_vec()).collect();
        let quant = (0..setting.k())
            .map(|k| (0..taus.len()).map(|t| q.quantile(k, t).unwrap_or_default().to_vec()).collect())
            .collect();
        return Ok((mean, quant));
    }
    // One set of draws serves both summaries.
    let curve = oracle_curve(setting, x_grid, &OracleFunctional::Joint, draws, seed, exec).at(Stage::Oracle)?;
    let mut mean = vec![Vec::with_capacity(x_grid.len()); setting.k()];
    let mut quant = vec![vec![Vec::with_capacity(x_grid.len()); taus.len()]; setting.k()];
    for g in 0..x_grid.len() {
        let block = curve.joint(g).expect("joint oracle keeps every level");
        for k in 0..setting.k() {
            let col = block.column(k);
            mean[k].push(col.mean());
            let sorted = sorted_copy(col.as_slice());
            for (t, &tau) in taus.iter().enumerate() {
                quant[k][t].push(quantile_type7(&sorted, tau));
            }
        }
    }
    Ok((mean, quant))
}

struct Recorder<'a> {
    setting: String,
    backbone: cfdist::cdfreg::BackboneKind,
    cfg: &'a RunConfig,
    seed: u64,
    out: ReplicationResult,
}

impl Recorder<'_> {
    fn score(&mut self, method: &str, metric: String, value: f64) {
        self.out.scores.push(ScoreRow {
            setting: self.setting.clone(),
            method: method.to_string(),
            backbone: backbone_label(method, self.backbone).to_string(),
            n: self.cfg.n,
            seed: self.seed,
            metric,
            value,
        });
    }

    fn fail(&mut self, method: &str, err: &CliError) {
        let stage = match err {
            CliError::Stage { stage, .. } => stage.to_string(),
            _ => "run".to_string(),
        };
        log::warn!("{} {} seed {}: {err}", self.setting, method, self.seed);
        self.out.failures.push(FailureRow {
            setting: self.setting.clone(),
            method: method.to_string(),
            seed: self.seed,
            stage,
            error: err.to_string(),
        });
    }

    fn curves(&mut self, method: &str, summaries: &[CurveSummaries], oracle: &Oracles) -> CliResult<()> {
        let k_all = summaries.len();
        for (k, s) in summaries.iter().enumerate() {
            if let Some(m) = &s.mean {
                let r = grid_mse(m, &oracle.0[k]).at(Stage::Scoring)?;
                self.score(method, metric_name("mean-mse", k, k_all), r.aggregate);
            }
            for (t, (tau, q)) in s.quantiles.iter().enumerate() {
                let r = grid_mse(q, &oracle.1[k][t]).at(Stage::Scoring)?;
                self.score(method, metric_name(&format!("quantile-mse-{tau}"), k, k_all), r.aggregate);
            }
        }
        Ok(())
    }

    fn joint(
        &mut self,
        method: JointMethod,
        est: &JointEstimate,
        truth: &[cfdist::DMatrix<f64>],
        watch: &mut Stopwatch,
    ) -> CliResult<()> {
        let draws = self.cfg.oracle.joint_draws;
        let samples = watch.time(method.name(), "joint-sample", || {
            est.sample(draws, derive_seed(self.seed, SAMPLING_STREAM))
        })?;
        let projection_seed = derive_seed(self.seed, PROJECTION_STREAM);
        let mut total = 0.0;
        for (a, b) in samples.iter().zip(truth) {
            total += sliced_wasserstein(a, b, self.cfg.oracle.projections, projection_seed).at(Stage::Scoring)?;
        }
        self.score(method.name(), "sliced-w1".into(), total / samples.len() as f64);
        if let cfdist::copula::CopulaModel::Gaussian { .. } = est.copula {
            self.score(method.name(), "copula-rho".into(), est.copula.off_diagonal(0, 1));
        }
        Ok(())
    }
}

/// One replication of one setting. Estimator failures are recorded and the
/// remaining estimators still run.
pub fn run_replication(setting: &ScmSetting, cfg: &RunConfig, seed: u64, exec: Execution) -> ReplicationResult {
    let mut rec = Recorder { setting: setting.label(), backbone: cfg.backbone.kind, cfg, seed, out: Default::default() };
    let mut watch = Stopwatch::default();
    if let Err(e) = replicate(setting, cfg, seed, exec, &mut rec, &mut watch) {
        rec.fail("all", &e);
    }
    for (method, stage, seconds) in watch.laps {
        rec.out.timings.push(TimingRow {
            setting: rec.setting.clone(),
            backbone: backbone_label(&method, cfg.backbone.kind).to_string(),
            method,
            n: cfg.n,
            seed,
            stage,
            seconds,
        });
    }
    rec.out
}

fn replicate(
    setting: &ScmSetting,
    cfg: &RunConfig,
    seed: u64,
    exec: Execution,
    rec: &mut Recorder,
    watch: &mut Stopwatch,
) -> CliResult<()> {
    let ds = watch
        .time("all", "simulate", || gen_observational(setting, cfg.n, derive_seed(seed, DATA_STREAM)))
        .at(Stage::Data)?;
    let grids = outcome_grids(&ds, cfg)?;
    let univariate = cfg.functionals.mean || !cfg.functionals.quantiles.is_empty();
    let oracle = if univariate {
        let o = watch.time("all", "oracle", || {
            univariate_oracles(
                setting,
                &grids[0].x_grid,
                &cfg.functionals.quantiles,
                cfg.oracle.mc_draws,
                derive_seed(seed, ORACLE_STREAM),
                exec,
            )
        })?;
        Some(o)
    } else {
        None
    };
    let joint = cfg.functionals.joint && ds.k() >= 2;
    let truth = if joint {
        let curve = watch
            .time("all", "oracle-joint", || {
                oracle_curve(
                    setting,
                    &cfg.grid.joint_x_grid(),
                    &OracleFunctional::Joint,
                    cfg.oracle.joint_draws,
                    derive_seed(seed, JOINT_ORACLE_STREAM),
                    exec,
                )
            })
            .at(Stage::Oracle)?;
        match curve.summary {
            cfdist::dgp::OracleSummary::Joint { draws } => draws,
            _ => unreachable!("joint oracle returns draws"),
        }
    } else {
        Vec::new()
    };

    for &est in &cfg.estimators {
        let method = est.name();
        let result = (|| -> CliResult<()> {
            match est {
                Estimator::Tabcf => {
                    let fit = fit_tabcf(&ds, cfg, derive_seed(seed, PIPELINE_STREAM), exec, watch)?;
                    if let Some(o) = &oracle {
                        let curves = tabcf_curves(&fit, &grids, cfg, exec, watch)?;
                        let s = curves.iter().map(|c| summarize(c, cfg, false)).collect::<CliResult<Vec<_>>>()?;
                        rec.curves(method, &s, o)?;
                    }
                    if joint {
                        let (gauss, indep) = tabcf_joint(&fit, &ds, cfg, exec, watch)?;
                        rec.joint(JointMethod::GaussianCopula, &gauss, &truth, watch)?;
                        rec.joint(JointMethod::Independence, &indep, &truth, watch)?;
                    }
                }
                Estimator::Naive => {
                    if let Some(o) = &oracle {
                        let curves = naive_curves(&ds, &grids, cfg, exec, watch)?;
                        let s = curves.iter().map(|c| summarize(c, cfg, false)).collect::<CliResult<Vec<_>>>()?;
                        rec.curves(method, &s, o)?;
                    }
                    if joint {
                        let est = naive_joint(&ds, cfg, exec, watch)?;
                        rec.joint(JointMethod::Naive, &est, &truth, watch)?;
                    }
                }
                Estimator::LinearCf => {
                    if let (Some(o), true) = (&oracle, cfg.functionals.mean) {
                        let means = linear_cf_means(&ds, &grids, watch)?;
                        let s: Vec<CurveSummaries> = means
                            .into_iter()
                            .map(|m| CurveSummaries { mean: Some(m), quantiles: Vec::new(), gini: None })
                            .collect();
                        rec.curves(method, &s, o)?;
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            rec.fail(method, &e);
        }
    }
    Ok(())
}

/// Every (setting, seed) replication on a pool of `cfg.workers()` threads.
/// Rows come back in (setting, seed) order whatever the scheduling.
pub fn run_benchmark(cfg: &RunConfig) -> CliResult<BenchmarkResult> {
    if cfg.settings.is_empty() {
        return Err(CliError::Config("benchmark needs at least one setting".into()));
    }
    if cfg.functionals.gini {
        log::warn!("gini has no oracle in the benchmark and is not scored");
    }
    let seeds = cfg.replication_seeds();
    let jobs: Vec<(&ScmSetting, u64)> = cfg.settings.iter().flat_map(|s| seeds.iter().map(move |&r| (s, r))).collect();
    let results = run_jobs(&jobs, cfg)?;
    let mut out = BenchmarkResult { replications: jobs.len(), ..Default::default() };
    for r in results {
        if !r.failures.is_empty() {
            out.failed_replications += 1;
        }
        out.scores.extend(r.scores);
        out.timings.extend(r.timings);
        out.failures.extend(r.failures);
    }
    Ok(out)
}

#[cfg(feature = "parallel")]
fn run_jobs(jobs: &[(&ScmSetting, u64)], cfg: &RunConfig) -> CliResult<Vec<ReplicationResult>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers())
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(|&(s, seed)| run_replication(s, cfg, seed, Execution::Parallel)).collect()))
}

#[cfg(not(feature = "parallel"))]
fn run_jobs(jobs: &[(&ScmSetting, u64)], cfg: &RunConfig) -> CliResult<Vec<ReplicationResult>> {
    Ok(jobs.iter().map(|&(s, seed)| run_replication(s, cfg, seed, Execution::Sequential)).collect())
}

/// Mean and sample standard deviation per (setting, method, backbone, n,
/// metric), in order of first appearance.
pub fn aggregate(scores: &[ScoreRow]) -> Vec<AggregateRow> {
    let mut order = Vec::new();
    let mut groups: HashMap<(&str, &str, &str, usize, &str), Vec<f64>> = HashMap::new();
    for s in scores {
        let key = (s.setting.as_str(), s.method.as_str(), s.backbone.as_str(), s.n, s.metric.as_str());
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(s.value);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                setting: key.0.to_string(),
                method: key.1.to_string(),
                backbone: key.2.to_string(),
                n: key.3,
                metric: key.4.to_string(),
                replications: v.len(),
                mean,
                sd,
            }
        })
        .collect()
}

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Io(std::io::Error::other(e)))
}

fn finish<W: std::io::Write>(mut w: csv::Writer<W>) -> CliResult<()> {
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

/// `scores.csv`, `aggregate.csv`, `timings.csv` and `failures.csv` in `dir`.
/// Numbers are written in shortest round-trip form so reruns are
/// byte-identical.
pub fn write_outputs(result: &BenchmarkResult, dir: &Path) -> CliResult<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut w = writer(&dir.join("scores.csv"))?;
    w.write_record(["setting", "method", "backbone", "n", "seed", "metric", "value"]).map_err(csv_err)?;
    for s in &result.scores {
        w.write_record([&s.setting, &s.method, &s.backbone, &s.n.to_string(), &s.seed.to_string(), &s.metric, &fmt_f64(s.value)])
            .map_err(csv_err)?;
    }
    finish(w)?;

    let mut w = writer(&dir.join("aggregate.csv"))?;
    w.write_record(["setting", "method", "backbone", "n", "metric", "replications", "mean", "sd"]).map_err(csv_err)?;
    for a in result.aggregate() {
        w.write_record([
            &a.setting,
            &a.method,
            &a.backbone,
            &a.n.to_string(),
            &a.metric,
            &a.replications.to_string(),
            &fmt_f64(a.mean),
            &fmt_f64(a.sd),
        ])
        .map_err(csv_err)?;
    }
    finish(w)?;

    let mut w = writer(&dir.join("timings.csv"))?;
    w.write_record(["setting", "method", "backbone", "n", "seed", "stage", "seconds"]).map_err(csv_err)?;
    for t in &result.timings {
        w.write_record([&t.setting, &t.method, &t.backbone, &t.n.to_string(), &t.seed.to_string(), &t.stage, &fmt_f64(t.seconds)])
            .map_err(csv_err)?;
    }
    finish(w)?;

    let mut w = writer(&dir.join("failures.csv"))?;
    w.write_record(["setting", "method", "seed", "stage", "error"]).map_err(csv_err)?;
    for f in &result.failures {
        w.write_record([&f.setting, &f.method, &f.seed.to_string(), &f.stage, &f.error]).map_err(csv_err)?;
    }
    finish(w)?;
    Ok(["scores.csv", "aggregate.csv", "timings.csv", "failures.csv"].map(String::from).to_vec())
}
