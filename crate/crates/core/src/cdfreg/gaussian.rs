use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, TargetSupport};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rows::Rows;
use crate::stats::fast_norm_cdf;

/// Relative scale floor: the residual sd never drops below this fraction of
/// the target range.
const SCALE_FLOOR: f64 = 1e-8;
/// E[log chi^2_1], the bias of a log squared normal residual.
const LOG_CHI2_1_MEAN: f64 = -1.270_362_845_461_478;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ScaleModel {
    Constant { sd: f64 },
    /// `log sd^2 = intercept + coef . features`
    LogLinear { intercept: f64, coef: Vec<f64>, floor: f64 },
}

/// Ordinary least squares location with normal residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLinear {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub scale: ScaleModel,
    support: TargetSupport,
}

/// Least squares `targets ~ 1 + features` via centred normal equations and a
/// pseudo-inverse, so collinear or constant columns get zero weight instead
/// of failing.
pub(crate) fn least_squares(features: &Rows, targets: &[f64]) -> (f64, Vec<f64>) {
    let (n, d) = (features.len(), features.dim());
    let y_mean = targets.iter().sum::<f64>() / n as f64;
    if d == 0 {
        return (y_mean, Vec::new());
    }
    let mut means = vec![0.0; d];
    for row in features.iter() {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    let mut c = vec![0.0; d];
    for (row, &y) in features.iter().zip(targets) {
        for k in 0..d {
            c[k] = row[k] - means[k];
        }
        let yc = y - y_mean;
        for a in 0..d {
            xty[a] += c[a] * yc;
            for b in a..d {
                xtx[(a, b)] += c[a] * c[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    let scale = (0..d).map(|k| xtx[(k, k)]).fold(0.0, f64::max);
    let svd = xtx.svd(true, true);
    let beta = svd
        .solve(&xty, scale * 1e-12)
        .unwrap_or_else(|_| DVector::zeros(d));
    let coef: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - coef.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    (intercept, coef)
}

impl GaussianLinear {
    /// Model with constant residual sd.
    pub fn from_parts(intercept: f64, coef: Vec<f64>, sd: f64, support: TargetSupport) -> Self {
        Self {
            intercept,
            coef,
            scale: ScaleModel::Constant { sd },
            support,
        }
    }

    pub(crate) fn fit(features: &Rows, targets: &[f64], config: &BackboneConfig) -> Result<Self> {
        let n = targets.len();
        let d = features.dim();
        let support = TargetSupport::of(targets);
        let floor = SCALE_FLOOR * support.range();
        let (intercept, coef) = least_squares(features, targets);
        let residuals: Vec<f64> = features
            .iter()
            .zip(targets)
            .map(|(f, y)| y - intercept - dot(&coef, f))
            .collect();
        let scale = if config.homoscedastic {
            let rss: f64 = residuals.iter().map(|r| r * r).sum();
            let dof = n.saturating_sub(d + 1).max(1);
            ScaleModel::Constant {
                sd: (rss / dof as f64).sqrt().max(floor),
            }
        } else {
            let eps = floor * floor + f64::MIN_POSITIVE;
            let log_sq: Vec<f64> = residuals.iter().map(|r| (r * r + eps).ln()).collect();
            let (li, lc) = least_squares(features, &log_sq);
            ScaleModel::LogLinear {
                intercept: li - LOG_CHI2_1_MEAN,
                coef: lc,
                floor,
            }
        };
        if !intercept.is_finite() || coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::Singular("least squares produced non-finite coefficients".into()));
        }
        Ok(Self {
            intercept,
            coef,
            scale,
            support,
        })
    }

    pub fn dim(&self) -> usize {
        self.coef.len()
    }

    pub fn support(&self) -> TargetSupport {
        self.support
    }

    pub fn location(&self, features: &[f64]) -> f64 {
        self.intercept + dot(&self.coef, features)
    }

    pub fn sd(&self, features: &[f64]) -> f64 {
        match &self.scale {
            ScaleModel::Constant { sd } => *sd,
            ScaleModel::LogLinear { intercept, coef, floor } => {
                (0.5 * (intercept + dot(coef, features))).exp().max(*floor)
            }
        }
    }

    pub(crate) fn cdf(&self, features: &[f64], y: f64) -> f64 {
        normal_cdf(y, self.location(features), self.sd(features))
    }

    pub(crate) fn slice(&self, features: &[f64], y_grid: &[f64]) -> Vec<f64> {
        let (m, s) = (self.location(features), self.sd(features));
        y_grid.iter().map(|&y| normal_cdf(y, m, s)).collect()
    }

    pub(crate) fn averaged_rows(
        &self,
        lead: &[f64],
        rest: &Rows,
        y_grid: &[f64],
        exec: Execution,
    ) -> Vec<Vec<f64>> {
        let (lead_coef, rest_coef) = self.coef.split_first().expect("dim >= 1");
        let rest_loc: Vec<f64> = rest.iter().map(|r| dot(rest_coef, r)).collect();
        let rest_scale: Option<Vec<(f64, f64)>> = match &self.scale {
            ScaleModel::Constant { .. } => None,
            ScaleModel::LogLinear { coef, .. } => {
                let (lc, rc) = coef.split_first().expect("dim >= 1");
                Some(rest.iter().map(|r| (*lc, dot(rc, r))).collect())
            }
        };
        let r_count = rest.len() as f64;
        exec.map(lead.len(), |g| {
            let x = lead[g];
            let mut acc = vec![0.0; y_grid.len()];
            for (r, &rl) in rest_loc.iter().enumerate() {
                let m = self.intercept + lead_coef * x + rl;
                let s = match (&self.scale, &rest_scale) {
                    (ScaleModel::Constant { sd }, _) => *sd,
                    (ScaleModel::LogLinear { intercept, floor, .. }, Some(rs)) => {
                        let (lc, rpart) = rs[r];
                        (0.5 * (intercept + lc * x + rpart)).exp().max(*floor)
                    }
                    _ => unreachable!(),
                };
                accumulate_normal(&mut acc, y_grid, m, s);
            }
            acc.iter_mut().for_each(|a| *a /= r_count);
            acc
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn normal_cdf(y: f64, m: f64, s: f64) -> f64 {
    if s > 0.0 {
        fast_norm_cdf((y - m) / s)
    } else if y >= m {
        1.0
    } else {
        0.0
    }
}

/// Adds `Phi((y - m) / s)` to every entry; grid points far in either tail
/// are handled without evaluating the CDF.
fn accumulate_normal(acc: &mut [f64], y_grid: &[f64], m: f64, s: f64) {
    if s <= 0.0 {
        let start = y_grid.partition_point(|&y| y < m);
        acc[start..].iter_mut().for_each(|a| *a += 1.0);
        return;
    }
    let lo = y_grid.partition_point(|&y| y <= m - 9.0 * s);
    let hi = y_grid.partition_point(|&y| y < m + 9.0 * s);
    let inv = 1.0 / s;
    for (a, &y) in acc[lo..hi].iter_mut().zip(&y_grid[lo..hi]) {
        *a += fast_norm_cdf((y - m) * inv);
    }
    acc[hi..].iter_mut().for_each(|a| *a += 1.0);
}
