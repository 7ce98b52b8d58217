use cfdist::cdfreg::BackboneConfig;
use cfdist::copula::{fit_gaussian_copula, pseudo_uniform_scores, sample_joint, JointInterventional, ScoreKind};
use cfdist::dataset::Dataset;
use cfdist::dgp::{gen_observational, oracle_curve, Outcome, OracleFunctional, ScmSetting, Treatment};
use cfdist::metrics::grid_mse;
use cfdist::pipeline::{
    cross_fit_controls, fit, interventional_cdf, interventional_mean, Conditioning, EvaluationGrid, PipelineConfig,
    VIntegration,
};
use cfdist::Execution;

#[test]
fn csv_round_trip_preserves_every_value() {
    let ds = gen_observational(&ScmSetting::new(Treatment::T1, Outcome::O1).with_covariate(), 200, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    ds.save_csv(&path).unwrap();
    let back = Dataset::load_csv(&path, ds.roles()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let ds = gen_observational(&ScmSetting::new(Treatment::T2, Outcome::O2), 600, 2).unwrap();
    let config = BackboneConfig::kernel();
    let a = cross_fit_controls(&ds, 5, &config, 3, Execution::Sequential).unwrap();
    let b = cross_fit_controls(&ds, 5, &config, 3, Execution::Parallel).unwrap();
    assert_eq!(a, b);

    let f = fit(&ds, &PipelineConfig::with_backbone(config)).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap();
    for integration in [VIntegration::Empirical, VIntegration::Quadrature] {
        let s = interventional_cdf(&f, &grid, 0, &Conditioning::Marginal, integration, Execution::Sequential).unwrap();
        let p = interventional_cdf(&f, &grid, 0, &Conditioning::Marginal, integration, Execution::Parallel).unwrap();
        assert_eq!(s, p);
    }
}

#[test]
fn pipeline_tracks_the_oracle_mean() {
    let setting = ScmSetting::new(Treatment::T1, Outcome::O1);
    let ds = gen_observational(&setting, 3000, 4).unwrap();
    let f = fit(&ds, &PipelineConfig::default()).unwrap();
    let grid = EvaluationGrid::for_dataset(&ds, 0).unwrap().with_x_grid(vec![-1.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    let icdf =
        interventional_cdf(&f, &grid, 0, &Conditioning::Marginal, VIntegration::Empirical, Execution::Parallel).unwrap();
    let truth = oracle_curve(&setting, &grid.x_grid, &OracleFunctional::Mean, 5000, 5, Execution::Parallel).unwrap();
    let mse = grid_mse(&interventional_mean(&icdf), truth.mean(0).unwrap()).unwrap().aggregate;
    assert!(mse < 0.1, "{mse}");
}

#[test]
fn joint_draws_carry_the_fitted_dependence() {
    let setting = ScmSetting::bivariate(Outcome::Bo1, 0.6);
    let ds = gen_observational(&setting, 2000, 6).unwrap();
    let f = fit(&ds, &PipelineConfig::default()).unwrap();
    let u = pseudo_uniform_scores(&f, &ds, ScoreKind::Interventional, Execution::Parallel).unwrap();
    let copula = fit_gaussian_copula(&u).unwrap();
    assert!(copula.off_diagonal(0, 1) > 0.6);
    let curves: Vec<_> = (0..2)
        .map(|k| {
            let grid = EvaluationGrid::for_dataset(&ds, k).unwrap().with_x_grid(vec![1.0]).unwrap();
            interventional_cdf(&f, &grid, k, &Conditioning::Marginal, VIntegration::Empirical, Execution::Parallel)
                .unwrap()
        })
        .collect();
    let joint = JointInterventional::from_curves(&curves, 0, copula).unwrap();
    let draws = sample_joint(&joint, 4000, 7).unwrap();
    let r = cfdist::stats::correlation(draws.column(0).as_slice(), draws.column(1).as_slice());
    assert!(r > 0.6, "{r}");
}
