use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::stats::{norm_cdf, norm_quantile};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// X = Z + H + e_X, Y = 2X - 3H + e_Y with Z ~ N(1.5, 0.75^2).
fn linear_sanity(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut z, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let zi = 1.5 + 0.75 * normal(&mut rng);
        let h = normal(&mut rng);
        let xi = zi + h + normal(&mut rng);
        z.push(zi);
        x.push(xi);
        y.push(2.0 * xi - 3.0 * h + normal(&mut rng));
    }
    Dataset::from_columns(z, x, y).unwrap()
}

fn ks_uniform(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| (u - i as f64 / n).max((i + 1) as f64 / n - u))
        .fold(0.0, f64::max)
}

fn exact_grid(x_grid: Vec<f64>, lo: f64, hi: f64, m: usize) -> EvaluationGrid {
    EvaluationGrid::new(x_grid, linspace(lo, hi, m)).unwrap()
}

fn icdf_from(y_grid: Vec<f64>, cdf: impl Fn(f64) -> f64) -> InterventionalCdf {
    let row = y_grid.iter().map(|&y| cdf(y)).collect();
    InterventionalCdf::from_rows(vec![0.0], y_grid, vec![row], Conditioning::Marginal).unwrap()
}

#[test]
fn first_stage_transforms_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 4000;
    let z: Vec<f64> = (0..n).map(|_| 1.5 + 0.75 * normal(&mut rng)).collect();
    let x: Vec<f64> = z.iter().map(|zi| zi + 2f64.sqrt() * normal(&mut rng)).collect();
    let ds = Dataset::from_columns(z, x.clone(), x).unwrap();
    let (_, v) = stage_u1(&ds, &BackboneConfig::gaussian_linear()).unwrap();
    assert_eq!(v.source(), ControlSource::FullSample);
    assert!(ks_uniform(v.values()) <= 0.03);
}

#[test]
fn constant_instrument_gives_marginal_ranks() {
    let x = vec![0.3, -1.0, 2.5, 0.9, 1.7, -0.2];
    let ds = Dataset::from_columns(vec![1.0; 6], x.clone(), x.clone()).unwrap();
    let (_, v) = stage_u1(&ds, &BackboneConfig::kernel()).unwrap();
    let ranks = crate::stats::average_ranks(&x);
    for (vi, r) in v.values().iter().zip(ranks) {
        assert!((vi - r / 6.0).abs() < 1e-12);
    }
}

#[test]
fn single_row_is_insufficient() {
    let ds = Dataset::from_columns(vec![1.0], vec![2.0], vec![3.0]).unwrap();
    for config in [BackboneConfig::gaussian_linear(), BackboneConfig::kernel(), BackboneConfig::histogram()] {
        assert!(matches!(stage_u1(&ds, &config), Err(Error::InsufficientData { .. })));
    }
}

#[test]
fn one_model_per_outcome() {
    let base = linear_sanity(200, 2);
    let y2: Vec<f64> = base.outcome(0).iter().map(|v| v * 0.5 + 1.0).collect();
    let y = DMatrix::from_fn(200, 2, |i, j| if j == 0 { base.outcome(0)[i] } else { y2[i] });
    let ds = Dataset::new(DMatrix::zeros(200, 0), base.z().to_vec(), base.x().to_vec(), y).unwrap();
    let fit = fit(&ds, &PipelineConfig::default()).unwrap();
    assert_eq!(fit.k(), 2);
    assert_eq!(fit.second_stage[0].dim(), 2);
    assert!(fit.first_stage.is_some());
}

#[test]
fn constant_outcome_gives_a_step() {
    let base = linear_sanity(300, 3);
    let ds = base.with_outcome(0, &[4.0; 300]).unwrap();
    let fit = fit(&ds, &PipelineConfig::default()).unwrap();
    let grid = exact_grid(vec![0.0, 1.5, 3.0], 3.0, 5.0, 201);
    let icdf = interventional_cdf(&fit, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Sequential)
        .unwrap();
    for row in &icdf.cdf {
        for (y, c) in grid.y_grid.iter().zip(row) {
            assert_eq!(*c, if *y < 4.0 { 0.0 } else { 1.0 });
        }
    }
    let means = interventional_mean(&icdf);
    assert!(means.iter().all(|m| (m - 4.0).abs() <= 0.01));
}

fn with_covariates(n: usize, seed: u64) -> Dataset {
    let base = linear_sanity(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let w = DMatrix::from_fn(n, 2, |_, _| normal(&mut rng));
    let y: Vec<f64> = (0..n).map(|i| base.outcome(0)[i] + 0.5 * w[(i, 0)] - w[(i, 1)]).collect();
    Dataset::new(w, base.z().to_vec(), base.x().to_vec(), DMatrix::from_vec(n, 1, y)).unwrap()
}

#[test]
fn covariate_order_does_not_matter_for_the_linear_backbone() {
    let ds = with_covariates(400, 4);
    let swapped_w = DMatrix::from_fn(400, 2, |i, j| ds.w()[(i, 1 - j)]);
    let swapped = Dataset::new(swapped_w, ds.z().to_vec(), ds.x().to_vec(), ds.y().clone()).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(linspace(0.0, 3.0, 7)).unwrap();
    let a = interventional_cdf(
        &fit(&ds, &PipelineConfig::default()).unwrap(),
        &grid,
        0,
        &Conditioning::Marginal,
        VIntegration::Empirical,
        Execution::Sequential,
    )
    .unwrap();
    let b = interventional_cdf(
        &fit(&swapped, &PipelineConfig::default()).unwrap(),
        &grid,
        0,
        &Conditioning::Marginal,
        VIntegration::Empirical,
        Execution::Sequential,
    )
    .unwrap();
    for (ra, rb) in a.cdf.iter().zip(&b.cdf) {
        for (ca, cb) in ra.iter().zip(rb) {
            assert!((ca - cb).abs() < 1e-9);
        }
    }
}

#[test]
fn single_control_row_reproduces_the_slice_bitwise() {
    let ds = linear_sanity(300, 5);
    for backbone in [BackboneConfig::gaussian_linear(), BackboneConfig::kernel(), BackboneConfig::histogram()] {
        let full = fit(&ds, &PipelineConfig::with_backbone(backbone)).unwrap();
        let controls = ControlValues::new(vec![full.controls.values()[7]], ControlSource::FullSample).unwrap();
        let mut single = full.clone();
        single.controls = controls;
        single.w = Rows::zero_width(1);
        let grid = exact_grid(vec![-1.0, 0.5, 2.0], -15.0, 15.0, 64);
        let icdf = interventional_cdf(
            &single,
            &grid,
            0,
            &Conditioning::Marginal,
            VIntegration::Empirical,
            Execution::Sequential,
        )
        .unwrap();
        for (g, &x) in grid.x_grid.iter().enumerate() {
            let slice = single.second_stage[0]
                .cdf_slice(&single.second_stage_features(x, 0), &grid.y_grid)
                .unwrap();
            assert_eq!(icdf.cdf[g], slice);
        }
    }
}

#[test]
fn unconfounded_design_matches_the_conditional_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 3000;
    let z: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let x: Vec<f64> = z.iter().map(|zi| zi + normal(&mut rng)).collect();
    let y: Vec<f64> = x.iter().map(|xi| 1.0 + xi + normal(&mut rng)).collect();
    let ds = Dataset::from_columns(z, x.clone(), y.clone()).unwrap();
    let fitted = fit(&ds, &PipelineConfig::default()).unwrap();
    let grid = exact_grid(vec![-1.0, 0.0, 1.0], -6.0, 8.0, 141);
    let icdf = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Sequential)
        .unwrap();
    let plain = CdfModel::fit(&Rows::from_columns(&[&x]).unwrap(), &y, &BackboneConfig::gaussian_linear()).unwrap();
    for (g, &xg) in grid.x_grid.iter().enumerate() {
        let direct = plain.cdf_slice(&[xg], &grid.y_grid).unwrap();
        for (a, b) in icdf.cdf[g].iter().zip(direct) {
            assert!((a - b).abs() < 0.02);
        }
    }
}

#[test]
fn linear_sanity_is_debiased_at_the_centre() {
    let ds = linear_sanity(4000, 7);
    let fitted = fit(&ds, &PipelineConfig::default()).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(vec![1.5]).unwrap();
    let icdf = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Parallel)
        .unwrap();
    assert!((icdf.eval(0, 3.0) - 0.5).abs() <= 0.05);

    // Truth is N(2x, 10): compare the whole curve as well.
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap();
    let icdf = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Parallel)
        .unwrap();
    let means = interventional_mean(&icdf);
    let mse = grid.x_grid.iter().zip(&means).map(|(x, m)| (m - 2.0 * x).powi(2)).sum::<f64>() / 200.0;
    assert!(mse < 0.1, "mse {mse}");
    let q9 = interventional_quantile(&icdf, 0.9).unwrap();
    let g = 100;
    let truth = 2.0 * grid.x_grid[g] + 10f64.sqrt() * norm_quantile(0.9);
    assert!((q9[g] - truth).abs() < 0.5);
}

#[test]
fn quadrature_agrees_with_empirical_average() {
    let ds = linear_sanity(2000, 8);
    let fitted = fit(&ds, &PipelineConfig::default()).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(linspace(0.0, 3.0, 5)).unwrap();
    let a = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Sequential)
        .unwrap();
    let b = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Quadrature, Execution::Sequential)
        .unwrap();
    for (ra, rb) in a.cdf.iter().zip(&b.cdf) {
        for (ca, cb) in ra.iter().zip(rb) {
            assert!((ca - cb).abs() < 0.02);
        }
    }
}

#[test]
fn conditional_curves_shift_with_the_covariate() {
    let ds = with_covariates(2000, 9);
    let fitted = fit(&ds, &PipelineConfig::default()).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(vec![1.5]).unwrap();
    let at = |w: Vec<f64>| {
        let icdf = interventional_cdf(
            &fitted,
            &grid,
            0,
            &Conditioning::Conditional { w },
            VIntegration::Empirical,
            Execution::Sequential,
        )
        .unwrap();
        interventional_mean(&icdf)[0]
    };
    // Outcome loads +0.5 on w1 and -1 on w2.
    let shift = at(vec![1.0, 0.0]) - at(vec![0.0, 0.0]);
    assert!((shift - 0.5).abs() < 0.15, "shift {shift}");
    let shift = at(vec![0.0, 1.0]) - at(vec![0.0, 0.0]);
    assert!((shift + 1.0).abs() < 0.15, "shift {shift}");
    assert!(matches!(
        interventional_cdf(
            &fitted,
            &grid,
            0,
            &Conditioning::Conditional { w: vec![0.0] },
            VIntegration::Empirical,
            Execution::Sequential
        ),
        Err(Error::Shape(_))
    ));
}

#[test]
fn linear_rows_need_no_repair() {
    let ds = linear_sanity(500, 10);
    let fitted = fit(&ds, &PipelineConfig::default()).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(linspace(0.0, 3.0, 9)).unwrap();
    let rest = averaging_rows(&fitted, &Conditioning::Marginal, VIntegration::Empirical).unwrap();
    let raw = fitted.second_stage[0]
        .averaged_cdf_rows(&grid.x_grid, &rest, &grid.y_grid, Execution::Sequential)
        .unwrap();
    let icdf = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Sequential)
        .unwrap();
    assert_eq!(raw, icdf.cdf);
}

#[test]
fn grid_errors() {
    assert!(matches!(EvaluationGrid::new(vec![], vec![0.0, 1.0]), Err(Error::Grid(_))));
    assert!(matches!(EvaluationGrid::new(vec![0.0], vec![1.0, 1.0]), Err(Error::Grid(_))));
    let ds = linear_sanity(100, 11);
    let fitted = fit(&ds, &PipelineConfig::default()).unwrap();
    let grid = EvaluationGrid { x_grid: vec![], y_grid: vec![0.0, 1.0] };
    assert!(matches!(
        interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Sequential),
        Err(Error::Grid(_))
    ));
}

#[test]
fn mean_of_simple_laws() {
    let step = icdf_from(linspace(0.0, 10.0, 101), |y| if y >= 4.0 { 1.0 } else { 0.0 });
    assert!((interventional_mean(&step)[0] - 4.0).abs() <= 0.1);
    let uniform = icdf_from(linspace(-0.5, 1.5, 201), |y| y.clamp(0.0, 1.0));
    assert!((interventional_mean(&uniform)[0] - 0.5).abs() <= 0.01);
    for x in [-1.0, 0.0, 1.5, 2.0] {
        let sd = 10f64.sqrt();
        let normal = icdf_from(linspace(2.0 * x - 6.0 * sd, 2.0 * x + 6.0 * sd, 512), |y| {
            norm_cdf((y - 2.0 * x) / sd)
        });
        assert!((interventional_mean(&normal)[0] - 2.0 * x).abs() <= 1e-3);
    }
}

#[test]
fn quantiles_of_a_discretized_normal() {
    let sd = 10f64.sqrt();
    let y = linspace(3.0 - 6.0 * sd, 3.0 + 6.0 * sd, 512);
    let step = y[1] - y[0];
    let icdf = icdf_from(y, |v| norm_cdf((v - 3.0) / sd));
    let median = interventional_quantile(&icdf, 0.5).unwrap()[0];
    assert!((median - interventional_mean(&icdf)[0]).abs() <= step);
    let q9 = interventional_quantile(&icdf, 0.9).unwrap()[0];
    assert!((q9 - 7.0527).abs() <= 0.02, "{q9}");
    for bad in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(interventional_quantile(&icdf, bad), Err(Error::Domain(_))));
    }
}

#[test]
fn quantile_picks_the_first_node_reaching_tau() {
    let icdf = icdf_from(vec![0.0, 1.0, 2.0, 3.0], |y| [0.0, 0.5, 0.5, 1.0][y as usize]);
    assert_eq!(interventional_quantile(&icdf, 0.5).unwrap()[0], 1.0);
    assert_eq!(interventional_quantile(&icdf, 0.25).unwrap()[0], 0.5);
    assert_eq!(interventional_quantile(&icdf, 0.75).unwrap()[0], 2.5);
}

#[test]
fn gini_of_closed_form_laws() {
    let point = icdf_from(linspace(0.0, 10.0, 512), |y| if y >= 5.0 { 1.0 } else { 0.0 });
    assert!(interventional_gini(&point).unwrap()[0].abs() <= 5e-3);
    let exp = icdf_from(linspace(0.0, 20.0, 512), |y| 1.0 - (-y).exp());
    assert!((interventional_gini(&exp).unwrap()[0] - 0.5).abs() <= 5e-3);
    let unif = icdf_from(linspace(0.0, 1.0, 512), |y| y);
    assert!((interventional_gini(&unif).unwrap()[0] - 1.0 / 3.0).abs() <= 5e-3);
    // Grid reaching below zero with no mass there is fine.
    let shifted = icdf_from(linspace(-2.0, 20.0, 600), |y| if y < 0.0 { 0.0 } else { 1.0 - (-y).exp() });
    assert!((interventional_gini(&shifted).unwrap()[0] - 0.5).abs() <= 5e-3);
    let negative = icdf_from(linspace(-3.0, 3.0, 100), norm_cdf);
    let err = interventional_gini(&negative).unwrap_err();
    assert!(matches!(err, Error::Domain(ref m) if m.contains("x = 0")));
}

#[test]
fn mean_matches_inverse_cdf_sampling() {
    let ds = linear_sanity(1000, 12);
    let fitted = fit(&ds, &PipelineConfig::with_backbone(BackboneConfig::kernel())).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(vec![0.5, 1.5, 2.5]).unwrap();
    let icdf = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Parallel)
        .unwrap();
    let means = interventional_mean(&icdf);
    let step = grid.y_grid[1] - grid.y_grid[0];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for g in 0..icdf.g() {
        let draws = 100_000;
        let sum: f64 = (0..draws)
            .map(|_| {
                let tau: f64 = rng.random_range(1e-9..1.0);
                row_quantile_for_test(&icdf, g, tau)
            })
            .sum();
        assert!((sum / draws as f64 - means[g]).abs() <= 3.0 * step);
    }
}

fn row_quantile_for_test(icdf: &InterventionalCdf, g: usize, tau: f64) -> f64 {
    let single = InterventionalCdf {
        x_grid: vec![icdf.x_grid[g]],
        y_grid: icdf.y_grid.clone(),
        cdf: vec![icdf.cdf[g].clone()],
        conditioning: Conditioning::Marginal,
    };
    interventional_quantile(&single, tau).unwrap()[0]
}

#[test]
fn leave_one_out_controls_never_see_their_row() {
    let ds = linear_sanity(5, 14);
    let config = BackboneConfig::gaussian_linear();
    let v = cross_fit_controls(&ds, 5, &config, 0, Execution::Sequential).unwrap();
    assert_eq!(v.source(), ControlSource::CrossFitted { folds: 5 });
    for i in 0..5 {
        let others: Vec<usize> = (0..5).filter(|&j| j != i).collect();
        let train = ds.select_rows(&others).unwrap();
        let (model, _) = stage_u1(&train, &config).unwrap();
        let expected = model.eval_cdf(&[ds.z()[i]], ds.x()[i]).unwrap();
        assert_eq!(v.values()[i], expected);
    }
}

#[test]
fn cross_fitted_controls_track_full_sample_controls() {
    let ds = linear_sanity(4000, 15);
    let config = BackboneConfig::gaussian_linear();
    let (_, full) = stage_u1(&ds, &config).unwrap();
    let cross = cross_fit_controls(&ds, DEFAULT_FOLDS, &config, 3, Execution::Parallel).unwrap();
    let sup = full
        .values()
        .iter()
        .zip(cross.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 0.05, "sup {sup}");
    let again = cross_fit_controls(&ds, DEFAULT_FOLDS, &config, 3, Execution::Sequential).unwrap();
    assert_eq!(cross, again);
}

#[test]
fn fold_errors() {
    let ds = linear_sanity(10, 16);
    let config = BackboneConfig::gaussian_linear();
    assert!(matches!(cross_fit_controls(&ds, 11, &config, 0, Execution::Sequential), Err(Error::Fold(_))));
    assert!(matches!(cross_fit_controls(&ds, 1, &config, 0, Execution::Sequential), Err(Error::Fold(_))));
}

#[test]
fn naive_estimator_carries_the_confounding_bias() {
    let ds = linear_sanity(4000, 17);
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap();
    let naive = naive_estimator(&ds, &grid, 0, &BackboneConfig::gaussian_linear(), Execution::Parallel).unwrap();
    let means = interventional_mean(&naive);
    let g = grid.x_grid.len();
    let slope = (means[g - 1] - means[0]) / (grid.x_grid[g - 1] - grid.x_grid[0]);
    assert!((slope - (2.0 - 3.0 / 2.5625)).abs() < 0.1, "slope {slope}");
    let mse = grid.x_grid.iter().zip(&means).map(|(x, m)| (m - 2.0 * x).powi(2)).sum::<f64>() / g as f64;
    assert!(mse >= 1.0, "mse {mse}");

    let flat = ds.with_outcome(0, &[2.0; 4000]).unwrap();
    let naive = naive_estimator(&flat, &grid, 0, &BackboneConfig::kernel(), Execution::Sequential);
    assert!(matches!(naive, Err(Error::Degenerate(_))));
    let naive = naive_estimator(&flat, &grid, 0, &BackboneConfig::gaussian_linear(), Execution::Sequential).unwrap();
    assert!(naive.cdf.iter().all(|row| row.iter().zip(&grid.y_grid).all(|(c, y)| *c == if *y < 2.0 { 0.0 } else { 1.0 })));
}

#[test]
fn naive_averages_over_covariates() {
    let ds = with_covariates(1500, 18);
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(vec![1.0, 2.0]).unwrap();
    let naive = naive_estimator(&ds, &grid, 0, &BackboneConfig::gaussian_linear(), Execution::Sequential).unwrap();
    let means = interventional_mean(&naive);
    // Covariates are centred, so averaging over them removes their effect.
    assert!((means[1] - means[0] - (2.0 - 3.0 / 2.5625)).abs() < 0.15);
}

#[test]
fn linear_cf_recovers_the_structural_slope() {
    let ds = linear_sanity(4000, 19);
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap();
    let fit = linear_cf_estimator(&ds, &grid, 0).unwrap();
    assert!((fit.slope_x() - 2.0).abs() <= 0.1);
    assert!(!fit.near_collinear);
    assert_eq!(fit.mean_curve.len(), 200);
}

#[test]
fn linear_cf_flags_an_irrelevant_instrument() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let n = 4000;
    let z: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + normal(&mut rng)).collect();
    let ds = Dataset::from_columns(z, x, y).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap();
    let fit = linear_cf_estimator(&ds, &grid, 0).unwrap();
    assert!(fit.near_collinear, "condition {}", fit.condition_number);
}

#[test]
fn linear_cf_is_exact_on_noiseless_data() {
    let n = 50;
    let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
    // Disturbance orthogonal to (1, z) so it equals the first-stage residual.
    let raw: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { z[i] });
    let (q, r) = design.clone().qr().unpack();
    let coef = r
        .solve_upper_triangular(&(q.transpose() * nalgebra::DVector::from_vec(raw.clone())))
        .unwrap();
    let u: Vec<f64> = (0..n).map(|i| raw[i] - coef[0] - coef[1] * z[i]).collect();
    let x: Vec<f64> = (0..n).map(|i| 0.5 + z[i] + u[i]).collect();
    let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x[i] + 0.7 * u[i]).collect();
    let ds = Dataset::from_columns(z, x, y).unwrap();
    let grid = EvaluationGrid::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
    let fit = linear_cf_estimator(&ds, &grid, 0).unwrap();
    assert!((fit.slope_x() - 2.0).abs() < 1e-10);
    assert!((fit.coefficients[2] - 0.7).abs() < 1e-10);
    assert!((fit.mean_curve[1] - 3.0).abs() < 1e-10);
}

#[test]
fn linear_cf_rejects_a_constant_instrument() {
    let ds = linear_sanity(100, 21).with_instrument(vec![1.0; 100]).unwrap();
    let grid = EvaluationGrid::new(vec![0.0], vec![0.0, 1.0]).unwrap();
    assert!(matches!(linear_cf_estimator(&ds, &grid, 0), Err(Error::Singular(_))));
}

#[test]
fn control_values_validate_range() {
    assert!(matches!(ControlValues::new(vec![0.5, 1.2], ControlSource::FullSample), Err(Error::Domain(_))));
    assert!((ControlScale::NormalScore.encode(0.0, 10) - norm_quantile(0.05)).abs() < 1e-12);
    assert_eq!(ControlScale::Uniform.encode(0.3, 10), 0.3);
}

#[test]
fn parallel_and_sequential_curves_agree() {
    let ds = linear_sanity(600, 22);
    for backbone in [BackboneConfig::gaussian_linear(), BackboneConfig::kernel(), BackboneConfig::histogram()] {
        let fitted = fit(&ds, &PipelineConfig::with_backbone(backbone)).unwrap();
        let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(linspace(0.0, 3.0, 11)).unwrap();
        let a = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Sequential)
            .unwrap();
        let b = interventional_cdf(&fitted, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Parallel)
            .unwrap();
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantiles_are_monotone_in_tau(raw in prop::collection::vec(0.0f64..1.0, 2..40), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
        let m = raw.len();
        let icdf = InterventionalCdf::from_rows(
            vec![0.0],
            linspace(0.0, 1.0, m),
            vec![raw],
            Conditioning::Marginal,
        ).unwrap();
        let row = icdf.row(0);
        prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(row.iter().all(|c| (0.0..=1.0).contains(c)));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let qlo = interventional_quantile(&icdf, lo).unwrap()[0];
        let qhi = interventional_quantile(&icdf, hi).unwrap()[0];
        prop_assert!(qlo <= qhi);
    }
}
