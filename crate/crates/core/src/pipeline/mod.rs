//! The control-function estimator: first stage (treatment given instrument
//! and covariates) producing control values, second stage (outcome given
//! treatment, control and covariates), and averaging over the controls to get
//! interventional CDFs on a grid.

mod baselines;
mod functionals;

pub use baselines::{linear_cf_estimator, naive_estimator, LinearCfFit, COLLINEARITY_WARNING};
pub use functionals::{interventional_gini, interventional_mean, interventional_quantile};
pub(crate) use functionals::row_quantile;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdfreg::{BackboneConfig, CdfModel, TargetSupport};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rows::Rows;
use crate::stats::{linspace, norm_quantile, quantile_type7, sorted_copy};

/// Default number of intervention levels.
pub const DEFAULT_X_POINTS: usize = 200;
/// Default number of outcome grid points.
pub const DEFAULT_Y_POINTS: usize = 512;
/// Nodes of the optional midpoint rule over the control.
pub const QUADRATURE_NODES: usize = 64;
/// Default number of cross-fitting folds.
pub const DEFAULT_FOLDS: usize = 5;
/// Rows whose lower end exceeds this (or upper end falls short of one minus
/// this) are logged as truncated.
const ENDPOINT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum ControlSource {
    FullSample,
    CrossFitted { folds: usize },
}

/// First-stage probability integral transforms `V_i = F(X_i | Z_i, W_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlValues {
    v: Vec<f64>,
    source: ControlSource,
}

impl ControlValues {
    pub fn new(v: Vec<f64>, source: ControlSource) -> Result<Self> {
        if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Domain(format!("control value {bad} outside [0, 1]")));
        }
        Ok(Self { v, source })
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    pub fn source(&self) -> ControlSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// How the control enters the second stage as a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlScale {
    /// The raw value in `[0, 1]`.
    Uniform,
    /// `Phi^-1(v)`, with `v` clipped to `[0.5/n, 1 - 0.5/n]`. A bijection of
    /// the control, so conditioning on it is equivalent; the linear backbone
    /// is well specified under it when the first-stage noise is Gaussian.
    #[default]
    NormalScore,
}

impl ControlScale {
    pub fn encode(self, v: f64, n: usize) -> f64 {
        match self {
            ControlScale::Uniform => v,
            ControlScale::NormalScore => {
                let eps = 0.5 / n.max(1) as f64;
                norm_quantile(v.clamp(eps, 1.0 - eps))
            }
        }
    }
}

/// How the integral over the control is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VIntegration {
    /// Average over the observed control values.
    #[default]
    Empirical,
    /// Midpoint rule with [`QUADRATURE_NODES`] nodes on `[0, 1]`.
    Quadrature,
}

impl VIntegration {
    pub fn name(self) -> &'static str {
        match self {
            VIntegration::Empirical => "empirical",
            VIntegration::Quadrature => "quadrature",
        }
    }
}

impl std::str::FromStr for VIntegration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(Self::Empirical),
            "quadrature" => Ok(Self::Quadrature),
            other => Err(Error::Config(format!(
                "unknown v-integration '{other}' (expected empirical or quadrature)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Conditioning {
    /// Averaged over the training covariate rows.
    Marginal,
    /// Covariates pinned at the given values.
    Conditional { w: Vec<f64> },
}

/// Intervention levels and outcome points at which curves are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    pub x_grid: Vec<f64>,
    pub y_grid: Vec<f64>,
}

fn check_increasing(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Grid(format!("{what} is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Grid(format!("{what} must be finite and strictly increasing")));
    }
    Ok(())
}

impl EvaluationGrid {
    pub fn new(x_grid: Vec<f64>, y_grid: Vec<f64>) -> Result<Self> {
        check_increasing(&x_grid, "x grid")?;
        check_increasing(&y_grid, "y grid")?;
        Ok(Self { x_grid, y_grid })
    }

    /// `x_points` levels equally spaced between the `trim` and `1 - trim`
    /// quantiles of `reference_x`, and `y_points` outcome values spanning the
    /// training outcome range plus margins.
    pub fn from_samples(
        reference_x: &[f64],
        outcome: &[f64],
        x_points: usize,
        y_points: usize,
        trim: f64,
    ) -> Result<Self> {
        if reference_x.is_empty() || outcome.is_empty() {
            return Err(Error::Grid("empty reference sample".into()));
        }
        if !(0.0..0.5).contains(&trim) {
            return Err(Error::Config(format!("trim {trim} outside [0, 0.5)")));
        }
        let sorted = sorted_copy(reference_x);
        let lo = quantile_type7(&sorted, trim);
        let hi = quantile_type7(&sorted, 1.0 - trim);
        let x_grid = if x_points == 1 { vec![0.5 * (lo + hi)] } else { linspace(lo, hi, x_points) };
        let y_grid = TargetSupport::of(outcome).grid(y_points);
        Self::new(x_grid, y_grid)
    }

    /// Grid from the treatment and `k`-th outcome of a dataset with the
    /// default sizes and 5%/95% trimming.
    pub fn for_dataset(ds: &Dataset, k: usize) -> Result<Self> {
        if k >= ds.k() {
            return Err(Error::Shape(format!("outcome index {k} out of range for {} outcomes", ds.k())));
        }
        Self::from_samples(ds.x(), &ds.outcome(k), DEFAULT_X_POINTS, DEFAULT_Y_POINTS, 0.05)
    }

    pub fn with_x_grid(&self, x_grid: Vec<f64>) -> Result<Self> {
        Self::new(x_grid, self.y_grid.clone())
    }
}

/// Estimated CDF of `Y(x)` for each intervention level (rows) at each
/// outcome grid point (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionalCdf {
    pub x_grid: Vec<f64>,
    pub y_grid: Vec<f64>,
    pub cdf: Vec<Vec<f64>>,
    pub conditioning: Conditioning,
}

impl InterventionalCdf {
    /// Wraps raw rows after monotone repair.
    pub fn from_rows(
        x_grid: Vec<f64>,
        y_grid: Vec<f64>,
        mut cdf: Vec<Vec<f64>>,
        conditioning: Conditioning,
    ) -> Result<Self> {
        check_increasing(&x_grid, "x grid")?;
        check_increasing(&y_grid, "y grid")?;
        if cdf.len() != x_grid.len() || cdf.iter().any(|r| r.len() != y_grid.len()) {
            return Err(Error::Shape(format!(
                "cdf must be {}x{}",
                x_grid.len(),
                y_grid.len()
            )));
        }
        for row in &mut cdf {
            monotone_repair(row);
        }
        Ok(Self { x_grid, y_grid, cdf, conditioning })
    }

    pub fn g(&self) -> usize {
        self.x_grid.len()
    }

    pub fn row(&self, g: usize) -> &[f64] {
        &self.cdf[g]
    }

    /// The CDF at `y` for level `g`, linear between grid points, 0 below
    /// and 1 above the grid.
    pub fn eval(&self, g: usize, y: f64) -> f64 {
        interpolate_cdf(&self.y_grid, &self.cdf[g], y)
    }

    /// Number of rows whose endpoints miss the `[0.02, 0.98]` coverage.
    pub fn truncated_rows(&self) -> usize {
        self.cdf
            .iter()
            .filter(|r| r[0] > ENDPOINT_TOLERANCE || r[r.len() - 1] < 1.0 - ENDPOINT_TOLERANCE)
            .count()
    }
}

pub(crate) fn interpolate_cdf(y_grid: &[f64], row: &[f64], y: f64) -> f64 {
    let m = y_grid.len();
    if y < y_grid[0] {
        return 0.0;
    }
    if y >= y_grid[m - 1] {
        return 1.0;
    }
    let j = y_grid.partition_point(|&g| g <= y);
    let (y0, y1) = (y_grid[j - 1], y_grid[j]);
    row[j - 1] + (y - y0) / (y1 - y0) * (row[j] - row[j - 1])
}

/// Running maximum then clipping to `[0, 1]`.
pub fn monotone_repair(row: &mut [f64]) {
    let mut running = f64::NEG_INFINITY;
    for c in row.iter_mut() {
        running = running.max(*c);
        *c = running.clamp(0.0, 1.0);
    }
}

/// Estimator settings shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PipelineConfig {
    pub first_stage: BackboneConfig,
    pub second_stage: BackboneConfig,
    pub control_scale: ControlScale,
    pub v_integration: VIntegration,
    /// 0 for full-sample controls, otherwise the number of folds.
    pub cross_fit_folds: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_backbone(BackboneConfig::gaussian_linear())
    }
}

impl PipelineConfig {
    pub fn with_backbone(backbone: BackboneConfig) -> Self {
        Self {
            first_stage: backbone.clone(),
            second_stage: backbone,
            control_scale: ControlScale::default(),
            v_integration: VIntegration::default(),
            cross_fit_folds: 0,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Fitted first and second stages together with the training controls and
/// covariates needed for the averaging step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfFit {
    pub first_stage: Option<CdfModel>,
    pub second_stage: Vec<CdfModel>,
    pub controls: ControlValues,
    pub control_scale: ControlScale,
    w: Rows,
}

impl CfFit {
    pub fn n(&self) -> usize {
        self.controls.len()
    }

    pub fn k(&self) -> usize {
        self.second_stage.len()
    }

    pub fn covariates(&self) -> &Rows {
        &self.w
    }

    /// The encoded control of training row `i`.
    pub fn encoded_control(&self, i: usize) -> f64 {
        self.control_scale.encode(self.controls.v[i], self.n())
    }

    /// Second-stage features `(x, control, w...)` of a training row with the
    /// treatment replaced by `x`.
    pub fn second_stage_features(&self, x: f64, i: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 + self.w.dim());
        f.push(x);
        f.push(self.encoded_control(i));
        f.extend_from_slice(self.w.row(i));
        f
    }
}

fn first_stage_features(ds: &Dataset) -> Rows {
    let mut rows = Rows::empty(1 + ds.p());
    let mut f = Vec::with_capacity(1 + ds.p());
    for i in 0..ds.n() {
        f.clear();
        f.push(ds.z()[i]);
        f.extend(ds.w().row(i).iter());
        rows.push(&f);
    }
    rows
}

fn covariate_rows(ds: &Dataset) -> Rows {
    let mut rows = Rows::empty(ds.p());
    for i in 0..ds.n() {
        rows.push(&ds.covariate_row(i));
    }
    rows
}

/// Fits `X | (Z, W)` and returns the in-sample transforms `V_i`.
pub fn stage_u1(ds: &Dataset, config: &BackboneConfig) -> Result<(CdfModel, ControlValues)> {
    let features = first_stage_features(ds);
    let model = CdfModel::fit(&features, ds.x(), config)?;
    let v = (0..ds.n())
        .map(|i| model.eval_cdf(features.row(i), ds.x()[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, ControlValues::new(v, ControlSource::FullSample)?))
}

/// Out-of-fold control values: row `i` is transformed by a first stage that
/// never saw it. Fold membership is a seeded shuffle dealt round-robin.
pub fn cross_fit_controls(
    ds: &Dataset,
    folds: usize,
    config: &BackboneConfig,
    seed: u64,
    exec: Execution,
) -> Result<ControlValues> {
    let n = ds.n();
    if folds < 2 {
        return Err(Error::Fold(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(Error::Fold(format!("{folds} folds exceed {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let features = first_stage_features(ds);
    let per_fold = exec.map(folds, |f| -> Result<Vec<(usize, f64)>> {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let x_train: Vec<f64> = train.iter().map(|&i| ds.x()[i]).collect();
        let model = CdfModel::fit(&features.select(&train), &x_train, config)?;
        (0..n)
            .filter(|&i| fold_of[i] == f)
            .map(|i| Ok((i, model.eval_cdf(features.row(i), ds.x()[i])?)))
            .collect()
    });
    let mut v = vec![0.0; n];
    for part in per_fold {
        for (i, value) in part? {
            v[i] = value;
        }
    }
    ControlValues::new(v, ControlSource::CrossFitted { folds })
}

/// Fits one `Y_k | (X, V, W)` model per outcome column.
pub fn stage_u2(
    ds: &Dataset,
    controls: &ControlValues,
    config: &BackboneConfig,
    scale: ControlScale,
) -> Result<CfFit> {
    let n = ds.n();
    if controls.len() != n {
        return Err(Error::Shape(format!("{} control values for {n} rows", controls.len())));
    }
    let mut features = Rows::empty(2 + ds.p());
    let mut f = Vec::with_capacity(2 + ds.p());
    for i in 0..n {
        f.clear();
        f.push(ds.x()[i]);
        f.push(scale.encode(controls.v[i], n));
        f.extend(ds.w().row(i).iter());
        features.push(&f);
    }
    let second_stage = (0..ds.k())
        .map(|k| CdfModel::fit(&features, &ds.outcome(k), config))
        .collect::<Result<Vec<_>>>()?;
    Ok(CfFit {
        first_stage: None,
        second_stage,
        controls: controls.clone(),
        control_scale: scale,
        w: covariate_rows(ds),
    })
}

/// Both fitting stages under `config`, with full-sample or cross-fitted
/// controls.
pub fn fit(ds: &Dataset, config: &PipelineConfig) -> Result<CfFit> {
    let (first, full) = stage_u1(ds, &config.first_stage)?;
    let controls = match config.cross_fit_folds {
        0 => full,
        k => cross_fit_controls(ds, k, &config.first_stage, config.seed, config.execution)?,
    };
    let mut fit = stage_u2(ds, &controls, &config.second_stage, config.control_scale)?;
    fit.first_stage = Some(first);
    Ok(fit)
}

/// The rows averaged over for one curve: encoded control followed by the
/// covariates.
fn averaging_rows(fit: &CfFit, conditioning: &Conditioning, integration: VIntegration) -> Result<Rows> {
    let p = fit.w.dim();
    if let Conditioning::Conditional { w } = conditioning {
        if w.len() != p {
            return Err(Error::Shape(format!("conditioning vector has {} entries, expected {p}", w.len())));
        }
    }
    let controls: Vec<f64> = match integration {
        VIntegration::Empirical => (0..fit.n()).map(|i| fit.encoded_control(i)).collect(),
        VIntegration::Quadrature => (0..QUADRATURE_NODES)
            .map(|j| fit.control_scale.encode((j as f64 + 0.5) / QUADRATURE_NODES as f64, fit.n()))
            .collect(),
    };
    let mut rows = Rows::empty(1 + p);
    let mut f = Vec::with_capacity(1 + p);
    match (integration, conditioning) {
        (VIntegration::Empirical, Conditioning::Marginal) => {
            for (i, &c) in controls.iter().enumerate() {
                f.clear();
                f.push(c);
                f.extend_from_slice(fit.w.row(i));
                rows.push(&f);
            }
        }
        (_, Conditioning::Conditional { w }) => {
            for &c in &controls {
                f.clear();
                f.push(c);
                f.extend_from_slice(w);
                rows.push(&f);
            }
        }
        (VIntegration::Quadrature, Conditioning::Marginal) => {
            // The control is uniform and independent of W, so the nodes are
            // crossed with every training covariate row.
            let w_rows = if p == 0 { 1 } else { fit.n() };
            for &c in &controls {
                for i in 0..w_rows {
                    f.clear();
                    f.push(c);
                    if p > 0 {
                        f.extend_from_slice(fit.w.row(i));
                    }
                    rows.push(&f);
                }
            }
        }
    }
    Ok(rows)
}

/// `(1/R) sum_r F(y | x_g, v_r, w_r)` for every grid cell, followed by
/// monotone repair.
pub fn interventional_cdf(
    fit: &CfFit,
    grid: &EvaluationGrid,
    outcome: usize,
    conditioning: &Conditioning,
    integration: VIntegration,
    exec: Execution,
) -> Result<InterventionalCdf> {
    check_increasing(&grid.x_grid, "x grid")?;
    check_increasing(&grid.y_grid, "y grid")?;
    let model = fit.second_stage.get(outcome).ok_or_else(|| {
        Error::Shape(format!("outcome index {outcome} out of range for {} outcomes", fit.k()))
    })?;
    let rest = averaging_rows(fit, conditioning, integration)?;
    let rows = model.averaged_cdf_rows(&grid.x_grid, &rest, &grid.y_grid, exec)?;
    let icdf = InterventionalCdf::from_rows(
        grid.x_grid.clone(),
        grid.y_grid.clone(),
        rows,
        conditioning.clone(),
    )?;
    let truncated = icdf.truncated_rows();
    if truncated > 0 {
        warn!("{truncated} of {} interventional CDF rows do not reach [0.02, 0.98] on the y grid", icdf.g());
    }
    Ok(icdf)
}

#[cfg(test)]
mod tests;
