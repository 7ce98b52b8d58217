use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_increasing, covariate_rows, Conditioning, EvaluationGrid, InterventionalCdf};
use crate::cdfreg::{BackboneConfig, CdfModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rows::Rows;

/// Condition number of the standardized second-stage design above which the
/// linear control-function fit is flagged as nearly collinear.
pub const COLLINEARITY_WARNING: f64 = 30.0;
/// Relative size of a QR pivot below which a design counts as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Direct regression of the outcome on treatment and covariates, averaged
/// over the training covariate rows. No instrument is used.
pub fn naive_estimator(
    ds: &Dataset,
    grid: &EvaluationGrid,
    outcome: usize,
    config: &BackboneConfig,
    exec: Execution,
) -> Result<InterventionalCdf> {
    check_increasing(&grid.x_grid, "x grid")?;
    check_increasing(&grid.y_grid, "y grid")?;
    if outcome >= ds.k() {
        return Err(Error::Shape(format!("outcome index {outcome} out of range for {} outcomes", ds.k())));
    }
    let w = covariate_rows(ds);
    let mut features = Rows::empty(1 + ds.p());
    for i in 0..ds.n() {
        let mut f = vec![ds.x()[i]];
        f.extend_from_slice(w.row(i));
        features.push(&f);
    }
    let model = CdfModel::fit(&features, &ds.outcome(outcome), config)?;
    let rest = if ds.p() == 0 { Rows::zero_width(1) } else { w };
    let rows = model.averaged_cdf_rows(&grid.x_grid, &rest, &grid.y_grid, exec)?;
    InterventionalCdf::from_rows(grid.x_grid.clone(), grid.y_grid.clone(), rows, Conditioning::Marginal)
}

/// Two-stage residual inclusion fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCfFit {
    /// Second-stage coefficients on `(1, X, residual, W...)`.
    pub coefficients: Vec<f64>,
    pub mean_curve: Vec<f64>,
    /// Condition number of the centred and scaled second-stage design.
    pub condition_number: f64,
    pub near_collinear: bool,
}

impl LinearCfFit {
    pub fn slope_x(&self) -> f64 {
        self.coefficients[1]
    }
}

fn solve_least_squares(design: &DMatrix<f64>, target: &DVector<f64>, stage: &str) -> Result<DVector<f64>> {
    let (q, r) = design.clone().qr().unpack();
    let diag_max = (0..r.ncols()).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..r.ncols()).any(|j| r[(j, j)].abs() <= RANK_TOLERANCE * diag_max.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular(format!("{stage} design is rank deficient")));
    }
    r.solve_upper_triangular(&(q.transpose() * target))
        .ok_or_else(|| Error::Singular(format!("{stage} triangular solve failed")))
}

fn standardized_condition(design: &DMatrix<f64>) -> f64 {
    // Drop the intercept, centre and scale the remaining columns.
    let (n, cols) = design.shape();
    let mut z = DMatrix::<f64>::zeros(n, cols - 1);
    for j in 1..cols {
        let col = design.column(j);
        let mean = col.mean();
        let norm = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        for i in 0..n {
            z[(i, j - 1)] = if norm > 0.0 { (col[i] - mean) / norm } else { 0.0 };
        }
    }
    let sv = z.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 { max / min } else { f64::INFINITY }
}

/// Linear control function: regress `X` on `(1, Z, W)`, then the outcome on
/// `(1, X, residual, W)`. The mean curve is
/// `intercept + slope_x x + slope_w . mean(W)`.
pub fn linear_cf_estimator(ds: &Dataset, grid: &EvaluationGrid, outcome: usize) -> Result<LinearCfFit> {
    let (n, p) = (ds.n(), ds.p());
    if n < p + 4 {
        return Err(Error::InsufficientData { needed: p + 4, got: n });
    }
    if outcome >= ds.k() {
        return Err(Error::Shape(format!("outcome index {outcome} out of range for {} outcomes", ds.k())));
    }
    check_increasing(&grid.x_grid, "x grid")?;
    let w = ds.w();
    let first = DMatrix::from_fn(n, 2 + p, |i, j| match j {
        0 => 1.0,
        1 => ds.z()[i],
        _ => w[(i, j - 2)],
    });
    let x = DVector::from_column_slice(ds.x());
    let gamma = solve_least_squares(&first, &x, "first-stage")?;
    let resid = &x - &first * gamma;
    let second = DMatrix::from_fn(n, 3 + p, |i, j| match j {
        0 => 1.0,
        1 => x[i],
        2 => resid[i],
        _ => w[(i, j - 3)],
    });
    let y = DVector::from_vec(ds.outcome(outcome));
    let beta = solve_least_squares(&second, &y, "second-stage")?;
    let condition_number = standardized_condition(&second);
    let near_collinear = condition_number > COLLINEARITY_WARNING;
    if near_collinear {
        warn!(
            "linear control-function design is nearly collinear (condition number {condition_number:.1}); the instrument may be weak"
        );
    }
    let w_effect: f64 = (0..p).map(|j| beta[3 + j] * w.column(j).mean()).sum();
    let mean_curve = grid
        .x_grid
        .iter()
        .map(|&xg| beta[0] + beta[1] * xg + w_effect)
        .collect();
    Ok(LinearCfFit {
        coefficients: beta.iter().copied().collect(),
        mean_curve,
        condition_number,
        near_collinear,
    })
}
