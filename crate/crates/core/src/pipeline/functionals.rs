use log::warn;

use super::{interpolate_cdf, InterventionalCdf};
use crate::error::{Error, Result};

/// Tail mass beyond the grid above which the mean is logged as unreliable.
const TAIL_MASS_WARNING: f64 = 1e-3;
/// Largest mass allowed below zero for the Gini index.
const NEGATIVE_MASS_TOLERANCE: f64 = 1e-3;

/// Mean of the discretized law of one row: point masses at the grid ends
/// for the tails, and each cell's mass at its midpoint. Equals
/// `y_0 + trapezoid(1 - F)`.
fn row_mean(y: &[f64], f: &[f64]) -> f64 {
    let mut mu = y[0];
    for m in 1..y.len() {
        mu += (y[m] - y[m - 1]) * (1.0 - 0.5 * (f[m - 1] + f[m]));
    }
    mu
}

/// Interventional mean curve.
pub fn interventional_mean(icdf: &InterventionalCdf) -> Vec<f64> {
    let y = &icdf.y_grid;
    let mut heavy_tails = 0;
    let means = icdf
        .cdf
        .iter()
        .map(|row| {
            if row[0] + (1.0 - row[row.len() - 1]) > TAIL_MASS_WARNING {
                heavy_tails += 1;
            }
            row_mean(y, row)
        })
        .collect();
    if heavy_tails > 0 {
        warn!("{heavy_tails} rows carry more than {TAIL_MASS_WARNING} mass outside the y grid");
    }
    means
}

/// Generalized inverse of one row: the first node with `F >= tau`, linearly
/// interpolated toward the previous node.
pub(crate) fn row_quantile(y: &[f64], f: &[f64], tau: f64) -> f64 {
    let m = f.partition_point(|&c| c < tau);
    if m == 0 {
        return y[0];
    }
    if m == f.len() {
        return y[y.len() - 1];
    }
    let (f0, f1) = (f[m - 1], f[m]);
    y[m - 1] + (tau - f0) / (f1 - f0) * (y[m] - y[m - 1])
}

/// Interventional `tau`-quantile curve.
pub fn interventional_quantile(icdf: &InterventionalCdf, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("quantile level {tau} outside (0, 1)")));
    }
    Ok(icdf
        .cdf
        .iter()
        .map(|row| row_quantile(&icdf.y_grid, row, tau))
        .collect())
}

/// Interventional Gini index `mu^-1 int_0^inf F (1 - F) dy`. Requires a
/// (numerically) nonnegative outcome.
pub fn interventional_gini(icdf: &InterventionalCdf) -> Result<Vec<f64>> {
    let y = &icdf.y_grid;
    icdf.cdf
        .iter()
        .zip(&icdf.x_grid)
        .map(|(row, &x)| {
            let start = y.partition_point(|&v| v < 0.0);
            // Mass at the negative grid nodes.
            let below = if start == 0 { 0.0 } else { row[start - 1] };
            if below > NEGATIVE_MASS_TOLERANCE {
                return Err(Error::Domain(format!(
                    "Gini index needs a nonnegative outcome; mass {below:.4} lies below zero at x = {x}"
                )));
            }
            let mu = row_mean(y, row);
            if mu <= 0.0 {
                return Err(Error::Domain(format!("nonpositive mean {mu} at x = {x}")));
            }
            let h = |c: f64| c * (1.0 - c);
            let mut area = 0.0;
            if start > 0 && start < y.len() {
                area += 0.5 * y[start] * (h(interpolate_cdf(y, row, 0.0)) + h(row[start]));
            }
            for m in start.max(1)..y.len() {
                if y[m - 1] >= 0.0 {
                    area += 0.5 * (y[m] - y[m - 1]) * (h(row[m - 1]) + h(row[m]));
                }
            }
            Ok(area / mu)
        })
        .collect()
}
