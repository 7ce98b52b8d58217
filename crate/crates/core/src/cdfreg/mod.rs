//! Conditional-CDF regression backbones.
//!
//! A fitted [`CdfModel`] evaluates `F(y | features)` and its generalized
//! inverse. Three native backbones are provided: an OLS location model with
//! normal residuals, a Nadaraya–Watson weighted empirical CDF, and a binned
//! histogram whose bin masses are kernel-weighted.

mod gaussian;
mod histogram;
mod kernel;

pub(crate) use gaussian::least_squares;
pub use gaussian::{GaussianLinear, ScaleModel};
pub use histogram::BinnedHistogram;
pub use kernel::KernelEmpirical;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rows::Rows;
use crate::stats::linspace;

/// Number of points in the quantile inversion grid.
pub const INVERSION_GRID_POINTS: usize = 512;
/// Fraction of the target range added on each side of the inversion grid.
pub const GRID_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    GaussianLinear,
    KernelEmpirical,
    BinnedHistogram,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::GaussianLinear => "gaussian-linear",
            BackboneKind::KernelEmpirical => "kernel-empirical",
            BackboneKind::BinnedHistogram => "binned-histogram",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-linear" => Ok(Self::GaussianLinear),
            "kernel-empirical" | "kernel" => Ok(Self::KernelEmpirical),
            "binned-histogram" | "histogram" => Ok(Self::BinnedHistogram),
            other => Err(Error::Config(format!(
                "unknown backbone '{other}' (expected gaussian-linear, kernel-empirical or binned-histogram)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// `n^(-1/(d+4))` in standardized units, i.e. times each feature's sd.
    RuleOfThumb,
    /// Fixed bandwidth in standardized units.
    Fixed(f64),
    /// The multiple of the rule of thumb with the smallest leave-one-out
    /// Brier score at the target deciles.
    CrossValidated,
}

impl std::str::FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rule-of-thumb" => Ok(Self::RuleOfThumb),
            "cross-validated" | "cv" => Ok(Self::CrossValidated),
            other => other.parse::<f64>().map(Self::Fixed).map_err(|_| {
                Error::Config(format!(
                    "unknown bandwidth '{other}' (expected rule-of-thumb, cross-validated or a positive number)"
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub bandwidth: Bandwidth,
    /// Kernel queries whose truncated support holds fewer training points
    /// than this fall back to the nearest `min_neighbors` points.
    pub min_neighbors: usize,
    pub bins: usize,
    pub homoscedastic: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::GaussianLinear,
            bandwidth: Bandwidth::RuleOfThumb,
            min_neighbors: 1,
            bins: 64,
            homoscedastic: true,
        }
    }
}

impl BackboneConfig {
    pub fn gaussian_linear() -> Self {
        Self::default()
    }

    pub fn kernel() -> Self {
        Self {
            kind: BackboneKind::KernelEmpirical,
            ..Self::default()
        }
    }

    pub fn histogram() -> Self {
        Self {
            kind: BackboneKind::BinnedHistogram,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
            }
        }
        if self.bins < 8 {
            return Err(Error::Config(format!("bin count must be at least 8, got {}", self.bins)));
        }
        if self.min_neighbors == 0 {
            return Err(Error::Config("neighbor count must be at least 1".into()));
        }
        Ok(())
    }

    /// Smallest training size this backbone accepts for `dim` features.
    pub fn min_rows(&self, dim: usize) -> usize {
        match self.kind {
            BackboneKind::GaussianLinear => (dim + 2).max(2),
            BackboneKind::KernelEmpirical => self.min_neighbors.max(2),
            BackboneKind::BinnedHistogram => self.min_neighbors.max(self.bins),
        }
    }
}

/// Range of the training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSupport {
    pub min: f64,
    pub max: f64,
}

impl TargetSupport {
    pub fn of(targets: &[f64]) -> Self {
        let min = targets.iter().copied().fold(f64::INFINITY, f64::min);
        let max = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Range used for grid construction; never zero.
    pub fn grid_range(&self) -> f64 {
        let r = self.range();
        if r > 0.0 {
            r
        } else {
            self.min.abs().max(1.0)
        }
    }

    /// Grid over `[min - margin*range, max + margin*range]`.
    pub fn grid(&self, points: usize) -> Vec<f64> {
        let r = self.grid_range();
        linspace(self.min - GRID_MARGIN * r, self.max + GRID_MARGIN * r, points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CdfModel {
    GaussianLinear(GaussianLinear),
    KernelEmpirical(KernelEmpirical),
    BinnedHistogram(BinnedHistogram),
}

impl CdfModel {
    pub fn fit(features: &Rows, targets: &[f64], config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let n = targets.len();
        if features.len() != n {
            return Err(Error::Shape(format!(
                "{} feature rows for {n} targets",
                features.len()
            )));
        }
        let needed = config.min_rows(features.dim());
        if n < needed {
            return Err(Error::InsufficientData { needed, got: n });
        }
        if features.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite feature or target".into()));
        }
        Ok(match config.kind {
            BackboneKind::GaussianLinear => {
                CdfModel::GaussianLinear(GaussianLinear::fit(features, targets, config)?)
            }
            BackboneKind::KernelEmpirical => {
                CdfModel::KernelEmpirical(KernelEmpirical::fit(features, targets, config)?)
            }
            BackboneKind::BinnedHistogram => {
                CdfModel::BinnedHistogram(BinnedHistogram::fit(features, targets, config)?)
            }
        })
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            CdfModel::GaussianLinear(_) => BackboneKind::GaussianLinear,
            CdfModel::KernelEmpirical(_) => BackboneKind::KernelEmpirical,
            CdfModel::BinnedHistogram(_) => BackboneKind::BinnedHistogram,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CdfModel::GaussianLinear(m) => m.dim(),
            CdfModel::KernelEmpirical(m) => m.dim(),
            CdfModel::BinnedHistogram(m) => m.dim(),
        }
    }

    pub fn support(&self) -> TargetSupport {
        match self {
            CdfModel::GaussianLinear(m) => m.support(),
            CdfModel::KernelEmpirical(m) => m.support(),
            CdfModel::BinnedHistogram(m) => m.support(),
        }
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dim() {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.dim(),
                features.len()
            )));
        }
        Ok(())
    }

    pub fn eval_cdf(&self, features: &[f64], y: f64) -> Result<f64> {
        self.check_dim(features)?;
        Ok(self.cdf_unchecked(features, y))
    }

    fn cdf_unchecked(&self, features: &[f64], y: f64) -> f64 {
        match self {
            CdfModel::GaussianLinear(m) => m.cdf(features, y),
            CdfModel::KernelEmpirical(m) => m.cdf(features, y),
            CdfModel::BinnedHistogram(m) => m.cdf(features, y),
        }
    }

    /// `F(ys[i] | rows[i])` for every row.
    pub fn eval_cdf_rows(&self, rows: &Rows, ys: &[f64], exec: Execution) -> Result<Vec<f64>> {
        if rows.dim() != self.dim() || rows.len() != ys.len() {
            return Err(Error::Shape("rows and targets do not match the model".into()));
        }
        Ok(exec.map(rows.len(), |i| self.cdf_unchecked(rows.row(i), ys[i])))
    }

    /// The CDF at `features` on an ascending grid.
    pub fn cdf_slice(&self, features: &[f64], y_grid: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        Ok(self.slice_unchecked(features, y_grid))
    }

    fn slice_unchecked(&self, features: &[f64], y_grid: &[f64]) -> Vec<f64> {
        match self {
            CdfModel::GaussianLinear(m) => m.slice(features, y_grid),
            CdfModel::KernelEmpirical(m) => m.slice(features, y_grid),
            CdfModel::BinnedHistogram(m) => m.slice(features, y_grid),
        }
    }

    pub fn inversion_grid(&self) -> Vec<f64> {
        self.support().grid(INVERSION_GRID_POINTS)
    }

    /// Generalized inverse `inf { y : F(y | features) >= tau }`. The inversion
    /// grid brackets the answer, then bisection on the exact CDF refines it.
    pub fn eval_quantile(&self, features: &[f64], tau: f64) -> Result<f64> {
        self.check_dim(features)?;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Domain(format!("quantile level {tau} not in (0, 1)")));
        }
        let grid = self.inversion_grid();
        let step = grid[1] - grid[0];
        let cdf = self.slice_unchecked(features, &grid);
        let f = |y: f64| self.cdf_unchecked(features, y);
        let (mut lo, mut hi) = match cdf.iter().position(|&c| c >= tau) {
            Some(0) => {
                let mut width = step;
                let mut lo = grid[0] - width;
                while f(lo) >= tau && width < 1e300 {
                    width *= 2.0;
                    lo = grid[0] - width;
                }
                (lo, lo + width)
            }
            Some(m) => (grid[m - 1], grid[m]),
            None => {
                let last = grid[grid.len() - 1];
                let mut width = step;
                let mut hi = last + width;
                while f(hi) < tau && width < 1e300 {
                    width *= 2.0;
                    hi = last + width;
                }
                (hi - width, hi)
            }
        };
        for _ in 0..200 {
            let mid = lo + 0.5 * (hi - lo);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) >= tau {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if let CdfModel::KernelEmpirical(m) = self {
            // The weighted ECDF jumps only at training targets.
            if let Some(t) = m.first_target_above(lo) {
                if t <= hi && f(t) >= tau {
                    return Ok(t);
                }
            }
        }
        Ok(hi)
    }

    /// Rows of `(1/R) sum_r F(y_m | lead_g, rest_r)` for every lead value `g`
    /// and grid point `m`. The lead value is the first feature; each rest row
    /// supplies the remaining `dim - 1` features.
    pub fn averaged_cdf_rows(
        &self,
        lead: &[f64],
        rest: &Rows,
        y_grid: &[f64],
        exec: Execution,
    ) -> Result<Vec<Vec<f64>>> {
        if self.dim() == 0 || rest.dim() != self.dim() - 1 {
            return Err(Error::Shape(format!(
                "averaging rows have width {}, model needs {}",
                rest.dim(),
                self.dim().saturating_sub(1)
            )));
        }
        if rest.is_empty() {
            return Err(Error::EmptyData("no rows to average over".into()));
        }
        if rest.len() == 1 || rest.dim() == 0 {
            let r0 = rest.row(0);
            return Ok(exec.map(lead.len(), |g| {
                let mut f = Vec::with_capacity(self.dim());
                f.push(lead[g]);
                f.extend_from_slice(r0);
                self.slice_unchecked(&f, y_grid)
            }));
        }
        Ok(match self {
            CdfModel::GaussianLinear(m) => m.averaged_rows(lead, rest, y_grid, exec),
            CdfModel::KernelEmpirical(m) => m.averaged_rows(lead, rest, y_grid, exec),
            CdfModel::BinnedHistogram(m) => m.averaged_rows(lead, rest, y_grid, exec),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Reference implementation of [`CdfModel::averaged_cdf_rows`] that averages
/// individual slices. Kept for tests of the specialised paths.
pub fn averaged_rows_by_slices(
    model: &CdfModel,
    lead: &[f64],
    rest: &Rows,
    y_grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(lead.len());
    for &x in lead {
        let mut acc = vec![0.0; y_grid.len()];
        for r in rest.iter() {
            let mut f = vec![x];
            f.extend_from_slice(r);
            for (a, c) in acc.iter_mut().zip(model.cdf_slice(&f, y_grid)?) {
                *a += c;
            }
        }
        acc.iter_mut().for_each(|a| *a /= rest.len() as f64);
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
