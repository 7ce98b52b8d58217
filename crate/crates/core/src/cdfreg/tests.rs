use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::stats::linspace;

fn all_configs() -> Vec<BackboneConfig> {
    vec![
        BackboneConfig::gaussian_linear(),
        BackboneConfig {
            homoscedastic: false,
            ..BackboneConfig::gaussian_linear()
        },
        BackboneConfig::kernel(),
        BackboneConfig::histogram(),
    ]
}

fn noisy_data(n: usize, d: usize, seed: u64) -> (Rows, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Rows::empty(d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let f: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let e: f64 = rng.sample(StandardNormal);
        y.push(f.iter().enumerate().map(|(k, v)| (k as f64 + 1.0) * v).sum::<f64>() + (1.0 + 0.3 * f[0].abs()) * e);
        rows.push(&f);
    }
    (rows, y)
}

#[test]
fn kernel_with_constant_features_is_the_empirical_cdf() {
    let rows = Rows::from_columns(&[&[0.0, 0.0, 0.0]]).unwrap();
    let model = CdfModel::fit(&rows, &[1.0, 3.0, 2.0], &BackboneConfig::kernel()).unwrap();
    assert_eq!(model.eval_cdf(&[0.0], 2.0).unwrap(), 2.0 / 3.0);
    assert_eq!(model.eval_cdf(&[5.0], 2.0).unwrap(), 2.0 / 3.0);
    assert_eq!(model.eval_cdf(&[0.0], 0.5).unwrap(), 0.0);
    assert_eq!(model.eval_cdf(&[0.0], 3.0).unwrap(), 1.0);
}

#[test]
fn kernel_two_point_quantile_is_the_upper_point() {
    let rows = Rows::from_columns(&[&[0.0, 0.0]]).unwrap();
    let model = CdfModel::fit(&rows, &[0.0, 1.0], &BackboneConfig::kernel()).unwrap();
    assert_eq!(model.eval_quantile(&[0.0], 0.75).unwrap(), 1.0);
    assert_eq!(model.eval_quantile(&[0.0], 0.5).unwrap(), 0.0);
}

#[test]
fn gaussian_exact_line_is_a_sharp_step() {
    let f: Vec<f64> = (0..20).map(|i| i as f64 / 4.0).collect();
    let y: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
    let rows = Rows::from_columns(&[&f]).unwrap();
    let model = CdfModel::fit(&rows, &y, &BackboneConfig::gaussian_linear()).unwrap();
    let delta = 1e-3;
    assert!(model.eval_cdf(&[1.0], 2.0 - delta).unwrap() < 1e-12);
    assert!(model.eval_cdf(&[1.0], 2.0 + delta).unwrap() > 1.0 - 1e-12);
}

#[test]
fn gaussian_median_is_exactly_one_half() {
    let (rows, y) = noisy_data(300, 2, 3);
    let model = CdfModel::fit(&rows, &y, &BackboneConfig::gaussian_linear()).unwrap();
    let CdfModel::GaussianLinear(g) = &model else { unreachable!() };
    let f = [0.3, -1.2];
    assert_eq!(model.eval_cdf(&f, g.location(&f)).unwrap(), 0.5);
}

#[test]
fn gaussian_fit_on_large_sample_centres_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f: Vec<f64> = (0..4000).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = f
        .iter()
        .map(|v| v + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let rows = Rows::from_columns(&[&f]).unwrap();
    let model = CdfModel::fit(&rows, &y, &BackboneConfig::gaussian_linear()).unwrap();
    assert!((model.eval_cdf(&[0.0], 0.0).unwrap() - 0.5).abs() < 0.03);
}

#[test]
fn gaussian_slope_and_sd_match_a_qr_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4000;
    let f: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0 + 1.0).collect();
    let y: Vec<f64> = f
        .iter()
        .map(|v| 0.5 - 1.5 * v + 0.7 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let rows = Rows::from_columns(&[&f]).unwrap();
    let CdfModel::GaussianLinear(g) =
        CdfModel::fit(&rows, &y, &BackboneConfig::gaussian_linear()).unwrap()
    else {
        unreachable!()
    };
    // Independent route: Householder QR of the full design.
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { f[i] });
    let (q, r) = design.clone().qr().unpack();
    let beta = r
        .solve_upper_triangular(&(q.transpose() * DVector::from_vec(y.clone())))
        .unwrap();
    let resid = DVector::from_vec(y) - &design * &beta;
    let sd_oracle = (resid.norm_squared() / (n - 2) as f64).sqrt();
    assert!((g.coef[0] - beta[1]).abs() < 1e-9);
    assert!((g.sd(&[0.0]) - sd_oracle).abs() < 1e-9);
    assert!((g.coef[0] + 1.5).abs() < 0.05 * 1.5);
    assert!((g.sd(&[0.0]) - 0.7).abs() < 0.05 * 0.7);
}

#[test]
fn gaussian_quantile_of_standard_normal() {
    let model = CdfModel::GaussianLinear(GaussianLinear::from_parts(
        0.0,
        vec![0.0],
        1.0,
        TargetSupport { min: -4.0, max: 4.0 },
    ));
    let q = model.eval_quantile(&[0.7], 0.975).unwrap();
    assert!((q - 1.959964).abs() < 1e-3, "{q}");
    let med = model.eval_quantile(&[0.7], 0.5).unwrap();
    let c = model.eval_cdf(&[0.7], med).unwrap();
    assert!((0.5..0.5 + 1e-6).contains(&c));
}

#[test]
fn tails_reach_zero_and_one() {
    let (rows, y) = noisy_data(400, 2, 9);
    let support = TargetSupport::of(&y);
    let lo = support.min - 10.0 * support.range();
    let hi = support.max + 10.0 * support.range();
    for config in all_configs() {
        let model = CdfModel::fit(&rows, &y, &config).unwrap();
        for f in [[0.0, 0.0], [3.0, -3.0], [-8.0, 8.0]] {
            assert!(model.eval_cdf(&f, lo).unwrap() <= 1e-6, "{:?}", config.kind);
            assert!(model.eval_cdf(&f, hi).unwrap() >= 1.0 - 1e-6, "{:?}", config.kind);
        }
    }
}

#[test]
fn quantile_and_cdf_are_consistent() {
    let (rows, y) = noisy_data(500, 2, 21);
    for config in all_configs() {
        let model = CdfModel::fit(&rows, &y, &config).unwrap();
        let grid = model.inversion_grid();
        let step = grid[1] - grid[0];
        for f in [[0.0, 0.0], [1.5, -0.5]] {
            for t in 1..=9 {
                let tau = t as f64 / 10.0;
                let q = model.eval_quantile(&f, tau).unwrap();
                assert!(model.eval_cdf(&f, q).unwrap() >= tau - 1e-9, "{:?} tau={tau}", config.kind);
                assert!(model.eval_cdf(&f, q - step).unwrap() < tau, "{:?} tau={tau}", config.kind);
            }
        }
    }
}

#[test]
fn error_paths() {
    let (rows, y) = noisy_data(50, 2, 1);
    let model = CdfModel::fit(&rows, &y, &BackboneConfig::kernel()).unwrap();
    assert!(matches!(model.eval_cdf(&[0.0], 0.0), Err(Error::Shape(_))));
    assert!(matches!(model.eval_quantile(&[0.0, 0.0], 1.0), Err(Error::Domain(_))));
    assert!(matches!(model.eval_quantile(&[0.0, 0.0], 0.0), Err(Error::Domain(_))));

    let one = Rows::from_columns(&[&[1.0]]).unwrap();
    for config in all_configs() {
        assert!(matches!(
            CdfModel::fit(&one, &[1.0], &config),
            Err(Error::InsufficientData { .. })
        ));
    }
    let flat = Rows::from_columns(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap();
    assert!(matches!(
        CdfModel::fit(&flat, &[2.0; 4], &BackboneConfig::kernel()),
        Err(Error::Degenerate(_))
    ));
    let bad_bins = BackboneConfig {
        bins: 4,
        ..BackboneConfig::histogram()
    };
    assert!(matches!(bad_bins.validate(), Err(Error::Config(_))));
}

#[test]
fn constant_target_gives_a_step_under_gaussian_linear() {
    let rows = Rows::from_columns(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap();
    let model = CdfModel::fit(&rows, &[2.5; 4], &BackboneConfig::gaussian_linear()).unwrap();
    assert_eq!(model.eval_cdf(&[3.0], 2.5 - 1e-9).unwrap(), 0.0);
    assert_eq!(model.eval_cdf(&[3.0], 2.5).unwrap(), 1.0);
}

#[test]
fn averaged_rows_match_slice_averages() {
    let (rows, y) = noisy_data(300, 3, 17);
    let lead = [-2.5, -0.1, 0.4, 3.9];
    let rest = Rows::from_rows(&[
        vec![0.0, 0.5],
        vec![-1.0, 2.0],
        vec![2.5, -2.0],
        vec![9.0, 9.0],
    ])
    .unwrap();
    let grid = linspace(-10.0, 10.0, 64);
    for config in all_configs().into_iter().chain([BackboneConfig {
        min_neighbors: 40,
        ..BackboneConfig::kernel()
    }]) {
        let model = CdfModel::fit(&rows, &y, &config).unwrap();
        let fast = model
            .averaged_cdf_rows(&lead, &rest, &grid, Execution::Sequential)
            .unwrap();
        let slow = averaged_rows_by_slices(&model, &lead, &rest, &grid).unwrap();
        for (a, b) in fast.iter().flatten().zip(slow.iter().flatten()) {
            assert!((a - b).abs() < 1e-12, "{:?}: {a} vs {b}", config.kind);
        }
        let par = model
            .averaged_cdf_rows(&lead, &rest, &grid, Execution::Parallel)
            .unwrap();
        assert_eq!(fast, par);
    }
}

#[test]
fn single_averaging_row_is_bitwise_the_slice() {
    let (rows, y) = noisy_data(200, 2, 2);
    let rest = Rows::from_rows(&[vec![0.3]]).unwrap();
    let grid = linspace(-6.0, 6.0, 50);
    for config in all_configs() {
        let model = CdfModel::fit(&rows, &y, &config).unwrap();
        let avg = model
            .averaged_cdf_rows(&[1.1], &rest, &grid, Execution::Sequential)
            .unwrap();
        assert_eq!(avg[0], model.cdf_slice(&[1.1, 0.3], &grid).unwrap());
    }
}

#[test]
fn models_survive_json() {
    let (rows, y) = noisy_data(100, 2, 8);
    for config in all_configs() {
        let model = CdfModel::fit(&rows, &y, &config).unwrap();
        let back = CdfModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            back.eval_cdf(&[0.2, 0.1], 0.4).unwrap(),
            model.eval_cdf(&[0.2, 0.1], 0.4).unwrap()
        );
    }
}

#[test]
fn histogram_bins_cover_training_targets() {
    let (rows, y) = noisy_data(800, 1, 4);
    let CdfModel::BinnedHistogram(h) = CdfModel::fit(&rows, &y, &BackboneConfig::histogram()).unwrap() else {
        unreachable!()
    };
    assert_eq!(h.bins(), 64);
    assert_eq!(h.training_targets().len(), 800);
}

fn cv_bandwidth(x: &[f64], y: &[f64]) -> f64 {
    let rows = Rows::from_columns(&[x]).unwrap();
    let config = BackboneConfig { bandwidth: Bandwidth::CrossValidated, ..BackboneConfig::kernel() };
    let CdfModel::KernelEmpirical(k) = CdfModel::fit(&rows, y, &config).unwrap() else {
        unreachable!()
    };
    k.bandwidth()[0] / (y.len() as f64).powf(-0.2)
}

#[test]
fn cross_validation_picks_narrower_bandwidth_for_wiggly_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1500;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let wiggly: Vec<f64> = x.iter().map(|&v| (6.0 * v).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let m_wiggly = cv_bandwidth(&x, &wiggly);
    let m_noise = cv_bandwidth(&x, &noise);
    assert!(m_wiggly < 0.5, "{m_wiggly}");
    assert!(m_wiggly < m_noise, "{m_wiggly} vs {m_noise}");
    assert!(kernel::CV_MULTIPLIERS.iter().any(|&m| (m - m_wiggly).abs() < 1e-12));
    assert_eq!(m_wiggly, cv_bandwidth(&x, &wiggly));
}

#[test]
fn cross_validation_widens_irrelevant_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 1500;
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = a.iter().map(|&v| (4.0 * v).sin() + 0.2 * rng.sample::<f64, _>(StandardNormal)).collect();
    let rows = Rows::from_columns(&[&a, &b]).unwrap();
    let config = BackboneConfig { bandwidth: Bandwidth::CrossValidated, ..BackboneConfig::kernel() };
    let CdfModel::KernelEmpirical(k) = CdfModel::fit(&rows, &y, &config).unwrap() else {
        unreachable!()
    };
    let h = k.bandwidth();
    assert!(h[0] < h[1], "{h:?}");
}

#[test]
fn bandwidth_parses() {
    assert_eq!("rule-of-thumb".parse::<Bandwidth>().unwrap(), Bandwidth::RuleOfThumb);
    assert_eq!("cv".parse::<Bandwidth>().unwrap(), Bandwidth::CrossValidated);
    assert_eq!("0.3".parse::<Bandwidth>().unwrap(), Bandwidth::Fixed(0.3));
    assert!("wide".parse::<Bandwidth>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cdf_is_monotone_and_bounded(seed in any::<u64>(), n in 12usize..80, which in 0usize..4, fx in -3.0f64..3.0) {
        let (rows, y) = noisy_data(n, 1, seed);
        let mut config = all_configs()[which].clone();
        config.bins = 8;
        let model = CdfModel::fit(&rows, &y, &config).unwrap();
        let s = model.support();
        let probe = linspace(s.min - s.range(), s.max + s.range(), 100);
        let mut prev = 0.0;
        for yv in probe {
            let c = model.eval_cdf(&[fx], yv).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert!(c >= prev);
            prev = c;
        }
    }
}
