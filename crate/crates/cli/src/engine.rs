//! Estimation steps shared by `fit` and `benchmark`, with stage attribution
//! and wall-clock timing.

use std::time::Instant;

use cfdist::cdfreg::{BackboneKind, TargetSupport};
use cfdist::copula::{
    curve_scores, fit_gaussian_copula, pseudo_uniform_scores, sample_joint, score_x_grid, CopulaModel,
    JointInterventional, ScoreKind,
};
use cfdist::dataset::Dataset;
use cfdist::pipeline::{
    cross_fit_controls, interventional_cdf, interventional_gini, interventional_mean, interventional_quantile,
    linear_cf_estimator, naive_estimator, stage_u1, stage_u2, CfFit, Conditioning, EvaluationGrid, InterventionalCdf,
};
use cfdist::Execution;

use crate::config::{Estimator, RunConfig};
use crate::error::{AtStage, CliResult, Stage};

/// Named wall-clock intervals in recording order.
#[derive(Debug, Default, Clone)]
pub struct Stopwatch {
    pub laps: Vec<(String, String, f64)>,
}

impl Stopwatch {
    /// Runs `f`, recording its duration under `(method, stage)`.
    pub fn time<T>(&mut self, method: &str, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.laps.push((method.to_string(), stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }
}

/// Trimmed evaluation grid for each outcome; all share the x levels.
pub fn outcome_grids(ds: &Dataset, cfg: &RunConfig) -> CliResult<Vec<EvaluationGrid>> {
    (0..ds.k())
        .map(|k| {
            EvaluationGrid::from_samples(ds.x(), &ds.outcome(k), cfg.grid.x_points, cfg.grid.y_points, cfg.grid.trim)
                .at(Stage::Data)
        })
        .collect()
}

/// Stages U1 and U2.
pub fn fit_tabcf(ds: &Dataset, cfg: &RunConfig, seed: u64, exec: Execution, watch: &mut Stopwatch) -> CliResult<CfFit> {
    let method = Estimator::Tabcf.name();
    let (first, full) = watch.time(method, "u1", || stage_u1(ds, &cfg.backbone)).at(Stage::U1)?;
    let controls = match cfg.cross_fit_folds {
        0 => full,
        k => watch
            .time(method, "u1-cross-fit", || cross_fit_controls(ds, k, &cfg.backbone, seed, exec))
            .at(Stage::U1)?,
    };
    let mut fit = watch
        .time(method, "u2", || stage_u2(ds, &controls, &cfg.backbone, cfg.control_scale))
        .at(Stage::U2)?;
    fit.first_stage = Some(first);
    Ok(fit)
}

/// Stage U3 for every outcome.
pub fn tabcf_curves(
    fit: &CfFit,
    grids: &[EvaluationGrid],
    cfg: &RunConfig,
    exec: Execution,
    watch: &mut Stopwatch,
) -> CliResult<Vec<InterventionalCdf>> {
    watch.time(Estimator::Tabcf.name(), "u3", || {
        grids
            .iter()
            .enumerate()
            .map(|(k, g)| interventional_cdf(fit, g, k, &Conditioning::Marginal, cfg.v_integration, exec).at(Stage::U3))
            .collect()
    })
}

pub fn naive_curves(
    ds: &Dataset,
    grids: &[EvaluationGrid],
    cfg: &RunConfig,
    exec: Execution,
    watch: &mut Stopwatch,
) -> CliResult<Vec<InterventionalCdf>> {
    watch.time(Estimator::Naive.name(), "fit", || {
        grids
            .iter()
            .enumerate()
            .map(|(k, g)| naive_estimator(ds, g, k, &cfg.backbone, exec).at(Stage::Baseline))
            .collect()
    })
}

/// Mean curves of the linear control-function baseline, one per outcome.
pub fn linear_cf_means(ds: &Dataset, grids: &[EvaluationGrid], watch: &mut Stopwatch) -> CliResult<Vec<Vec<f64>>> {
    watch.time(Estimator::LinearCf.name(), "fit", || {
        grids
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let fit = linear_cf_estimator(ds, g, k).at(Stage::Baseline)?;
                if fit.near_collinear {
                    log::warn!("linear-cf: near-collinear design (condition number {:.1})", fit.condition_number);
                }
                Ok(fit.mean_curve)
            })
            .collect()
    })
}

/// Functionals of one CDF curve as requested by the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummaries {
    pub mean: Option<Vec<f64>>,
    pub quantiles: Vec<(f64, Vec<f64>)>,
    pub gini: Option<Vec<f64>>,
}

pub fn summarize(icdf: &InterventionalCdf, cfg: &RunConfig, with_gini: bool) -> CliResult<CurveSummaries> {
    let f = &cfg.functionals;
    Ok(CurveSummaries {
        mean: f.mean.then(|| interventional_mean(icdf)),
        quantiles: f
            .quantiles
            .iter()
            .map(|&t| Ok((t, interventional_quantile(icdf, t).at(Stage::U3)?)))
            .collect::<CliResult<_>>()?,
        gini: if with_gini && f.gini { Some(interventional_gini(icdf).at(Stage::U3)?) } else { None },
    })
}

/// Joint-law estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointMethod {
    GaussianCopula,
    Independence,
    Naive,
}

impl JointMethod {
    pub fn name(self) -> &'static str {
        match self {
            JointMethod::GaussianCopula => "tabcf-gaussian-copula",
            JointMethod::Independence => "tabcf-independence",
            JointMethod::Naive => "naive",
        }
    }
}

/// Marginal CDF curves on the joint x grid plus a working copula.
#[derive(Debug, Clone)]
pub struct JointEstimate {
    pub marginals: Vec<InterventionalCdf>,
    pub copula: CopulaModel,
}

impl JointEstimate {
    pub fn law(&self, g: usize) -> CliResult<JointInterventional> {
        JointInterventional::from_curves(&self.marginals, g, self.copula.clone()).at(Stage::Copula)
    }

    /// `m` draws at every joint level; level `g` uses `derive_seed(seed, g)`.
    pub fn sample(&self, m: usize, seed: u64) -> CliResult<Vec<cfdist::DMatrix<f64>>> {
        (0..self.marginals[0].x_grid.len())
            .map(|g| sample_joint(&self.law(g)?, m, cfdist::dgp::derive_seed(seed, g as u64)).at(Stage::Copula))
            .collect()
    }
}

fn joint_grids(ds: &Dataset, cfg: &RunConfig) -> CliResult<Vec<EvaluationGrid>> {
    let x = cfg.grid.joint_x_grid();
    (0..ds.k())
        .map(|k| EvaluationGrid::new(x.clone(), TargetSupport::of(&ds.outcome(k)).grid(cfg.grid.y_points)).at(Stage::Data))
        .collect()
}

/// Estimated joint laws from a fitted pipeline: the Gaussian copula from
/// interventional pseudo-scores, and the independence baseline on the same
/// marginals.
pub fn tabcf_joint(
    fit: &CfFit,
    ds: &Dataset,
    cfg: &RunConfig,
    exec: Execution,
    watch: &mut Stopwatch,
) -> CliResult<(JointEstimate, JointEstimate)> {
    let grids = joint_grids(ds, cfg)?;
    let method = JointMethod::GaussianCopula.name();
    let marginals = watch.time(method, "u3-joint", || {
        grids
            .iter()
            .enumerate()
            .map(|(k, g)| interventional_cdf(fit, g, k, &Conditioning::Marginal, cfg.v_integration, exec).at(Stage::U3))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let copula = watch.time(method, "copula", || {
        let u = pseudo_uniform_scores(fit, ds, ScoreKind::Interventional, exec).at(Stage::Copula)?;
        fit_gaussian_copula(&u).at(Stage::Copula)
    })?;
    let k = ds.k();
    Ok((
        JointEstimate { marginals: marginals.clone(), copula },
        JointEstimate { marginals, copula: CopulaModel::Independence { k } },
    ))
}

/// Observational conditional marginals coupled by the Gaussian copula of
/// their own scores.
pub fn naive_joint(ds: &Dataset, cfg: &RunConfig, exec: Execution, watch: &mut Stopwatch) -> CliResult<JointEstimate> {
    watch.time(JointMethod::Naive.name(), "joint", || {
        let grids = joint_grids(ds, cfg)?;
        let marginals = (0..ds.k())
            .map(|k| naive_estimator(ds, &grids[k], k, &cfg.backbone, exec).at(Stage::Baseline))
            .collect::<CliResult<Vec<_>>>()?;
        let score_grid = score_x_grid(ds);
        let score_curves = (0..ds.k())
            .map(|k| {
                let g = grids[k].with_x_grid(score_grid.clone()).at(Stage::Data)?;
                naive_estimator(ds, &g, k, &cfg.backbone, exec).at(Stage::Baseline)
            })
            .collect::<CliResult<Vec<_>>>()?;
        let u = curve_scores(&score_curves, ds).at(Stage::Copula)?;
        Ok(JointEstimate { marginals, copula: fit_gaussian_copula(&u).at(Stage::Copula)? })
    })
}

/// Backbone label of an estimator in output rows.
pub fn backbone_label(estimator: &str, kind: BackboneKind) -> &'static str {
    if estimator == Estimator::LinearCf.name() { "ols" } else { kind.name() }
}
