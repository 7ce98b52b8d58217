//! Goodness-of-fit checks for the first stage: uniformity of the control
//! values, their independence from the instrument, and a stratified check
//! of `Y ⫫ Z | (X, V)`. All checks are advisory.

use serde::{Deserialize, Serialize};

use crate::cdfreg::least_squares;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{distance_correlation, pit_uniformity, DcorTest};
use crate::pipeline::{ControlScale, ControlValues};
use crate::rows::Rows;
use crate::stats::{average_ranks, correlation};

/// Smallest stratum kept by the conditional-independence check.
pub const MIN_STRATUM: usize = 20;
/// Default number of equal-mass bins per stratifying variable.
pub const DEFAULT_BINS: usize = 4;
/// Significance level of every check.
pub const ALPHA: f64 = 0.05;
/// Attached to every report.
pub const CAVEAT: &str = "passing these checks does not establish the instrument or control-function conditions";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Warn,
}

impl Verdict {
    fn from_pass(pass: bool) -> Self {
        if pass { Verdict::Pass } else { Verdict::Warn }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumResult {
    pub index: usize,
    pub size: usize,
    pub dcor: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalReport {
    pub strata: Vec<StratumResult>,
    /// `(index, size)` of strata below [`MIN_STRATUM`].
    pub skipped: Vec<(usize, usize)>,
    pub rejection_fraction: f64,
    /// Always set: binning only approximates conditioning.
    pub approximate: bool,
    /// Whether covariates took part in the stratification.
    pub covariates_stratified: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub n: usize,
    pub ks_statistic: f64,
    pub ks_threshold: f64,
    pub pit_verdict: Verdict,
    pub dcor: f64,
    pub dcor_p_value: f64,
    pub independence_verdict: Verdict,
    /// Correlation of the control values with the ranks of the treatment.
    /// Values near one mean the instrument explains little of the
    /// treatment.
    pub relevance_hint: f64,
    pub conditional: Option<ConditionalReport>,
    pub caveat: String,
}

/// The two first-stage checks: KS uniformity of `V` and a distance
/// correlation test of `V` against `Z`.
pub fn first_stage_report(
    ds: &Dataset,
    v: &ControlValues,
    permutations: usize,
    seed: u64,
    exec: Execution,
) -> Result<DiagnosticReport> {
    if v.len() != ds.n() {
        return Err(Error::Shape(format!("{} control values for {} rows", v.len(), ds.n())));
    }
    let pit = pit_uniformity(v.values())?;
    let DcorTest { dcor, p_value } = distance_correlation(v.values(), ds.z(), permutations, seed, exec)?;
    let relevance_hint = correlation(v.values(), &average_ranks(ds.x()));
    Ok(DiagnosticReport {
        n: ds.n(),
        ks_statistic: pit.ks_statistic,
        ks_threshold: pit.threshold,
        pit_verdict: Verdict::from_pass(pit.pass),
        dcor,
        dcor_p_value: p_value,
        independence_verdict: Verdict::from_pass(p_value > ALPHA),
        relevance_hint,
        conditional: None,
        caveat: CAVEAT.to_string(),
    })
}

/// Splits `members` into `bins` consecutive equal-mass groups by `key`.
fn equal_mass_split(members: &[usize], key: impl Fn(usize) -> f64, bins: usize) -> Vec<Vec<usize>> {
    let mut sorted = members.to_vec();
    sorted.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    let n = sorted.len();
    (0..bins)
        .map(|b| sorted[b * n / bins..(b + 1) * n / bins].to_vec())
        .collect()
}

/// Outcome residuals after a within-stratum quadratic fit in
/// `(X, Phi^-1(V), W)`, so only dependence not explained by the
/// conditioning variables is left for the test.
fn residualized_outcome(ds: &Dataset, v: &[f64], members: &[usize], k: usize) -> Vec<f64> {
    let n = ds.n();
    let y = ds.y();
    let mut features = Rows::empty(5 + ds.p());
    for &i in members {
        let x = ds.x()[i];
        let c = ControlScale::NormalScore.encode(v[i], n);
        let mut f = vec![x, x * x, c, c * c, x * c];
        f.extend(ds.w().row(i).iter());
        features.push(&f);
    }
    let targets: Vec<f64> = members.iter().map(|&i| y[(i, k)]).collect();
    let (intercept, coef) = least_squares(&features, &targets);
    features
        .iter()
        .zip(&targets)
        .map(|(f, t)| t - intercept - f.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Approximate check of `Y ⫫ Z | (X, V, W)`: equal-mass bins on `X`, then
/// on `V` within each `X` bin, then a median split per covariate when there
/// are at most two; within each stratum of at least [`MIN_STRATUM`] rows the
/// outcome is residualized on the conditioning variables and tested against
/// the instrument.
pub fn conditional_independence_check(
    ds: &Dataset,
    v: &ControlValues,
    outcome: usize,
    bins: usize,
    permutations: usize,
    seed: u64,
    exec: Execution,
) -> Result<ConditionalReport> {
    if bins < 1 {
        return Err(Error::Config("need at least one bin".into()));
    }
    if v.len() != ds.n() {
        return Err(Error::Shape(format!("{} control values for {} rows", v.len(), ds.n())));
    }
    if outcome >= ds.k() {
        return Err(Error::Shape(format!("outcome index {outcome} out of range")));
    }
    let values = v.values();
    let all: Vec<usize> = (0..ds.n()).collect();
    let mut strata = Vec::new();
    for xb in equal_mass_split(&all, |i| ds.x()[i], bins) {
        strata.extend(equal_mass_split(&xb, |i| values[i], bins));
    }
    let covariates_stratified = (1..=2).contains(&ds.p());
    if covariates_stratified {
        for j in 0..ds.p() {
            strata = strata
                .into_iter()
                .flat_map(|s| equal_mass_split(&s, |i| ds.w()[(i, j)], 2))
                .collect();
        }
    }
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (index, members) in strata.into_iter().enumerate() {
        if members.len() < MIN_STRATUM {
            skipped.push((index, members.len()));
        } else {
            kept.push((index, members));
        }
    }
    if kept.is_empty() {
        return Err(Error::Stratification(format!(
            "no stratum has {MIN_STRATUM} or more rows ({} skipped)",
            skipped.len()
        )));
    }
    let results = exec.map(kept.len(), |s| -> Result<StratumResult> {
        let (index, members) = &kept[s];
        let resid = residualized_outcome(ds, values, members, outcome);
        let z: Vec<f64> = members.iter().map(|&i| ds.z()[i]).collect();
        let t = distance_correlation(&resid, &z, permutations, seed ^ *index as u64, Execution::Sequential)?;
        Ok(StratumResult { index: *index, size: members.len(), dcor: t.dcor, p_value: t.p_value })
    });
    let strata = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rejected = strata.iter().filter(|s| s.p_value <= ALPHA).count();
    let rejection_fraction = rejected as f64 / strata.len() as f64;
    Ok(ConditionalReport {
        strata,
        skipped,
        rejection_fraction,
        approximate: true,
        covariates_stratified,
        // Twice the nominal level leaves room for multiple strata.
        verdict: Verdict::from_pass(rejection_fraction <= 2.0 * ALPHA),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{gen_observational, oracle_controls, Outcome, ScmSetting, Treatment};
    use crate::pipeline::{stage_u1, ControlSource};
    use crate::cdfreg::BackboneConfig;

    fn oracle(setting: &ScmSetting, ds: &Dataset) -> ControlValues {
        ControlValues::new(oracle_controls(setting, ds), ControlSource::FullSample).unwrap()
    }

    #[test]
    fn oracle_controls_pass_first_stage_checks() {
        let s = ScmSetting::new(Treatment::T1, Outcome::O2);
        let ds = gen_observational(&s, 2000, 1).unwrap();
        let r = first_stage_report(&ds, &oracle(&s, &ds), 199, 1, Execution::Parallel).unwrap();
        assert_eq!(r.pit_verdict, Verdict::Pass);
        assert_eq!(r.independence_verdict, Verdict::Pass);
        assert!(r.dcor_p_value > 0.0 && r.dcor_p_value <= 1.0);
        assert!(r.ks_statistic <= 1.0);
        assert_eq!(r.caveat, CAVEAT);
    }

    #[test]
    fn shuffled_instrument_shows_in_the_relevance_hint() {
        let s = ScmSetting::new(Treatment::T1, Outcome::O2);
        let ds = gen_observational(&s, 2000, 2).unwrap();
        let mut z = ds.z().to_vec();
        z.reverse();
        let shuffled = ds.with_instrument(z).unwrap();
        let config = BackboneConfig::gaussian_linear();
        let (_, v) = stage_u1(&ds, &config).unwrap();
        let (_, vs) = stage_u1(&shuffled, &config).unwrap();
        let good = first_stage_report(&ds, &v, 99, 3, Execution::Sequential).unwrap();
        let bad = first_stage_report(&shuffled, &vs, 99, 3, Execution::Sequential).unwrap();
        assert!(bad.relevance_hint > 0.99);
        assert!(good.relevance_hint < 0.95);
    }

    #[test]
    fn valid_design_rarely_rejects() {
        let s = ScmSetting::new(Treatment::T1, Outcome::O2);
        let ds = gen_observational(&s, 4000, 4).unwrap();
        let r = conditional_independence_check(&ds, &oracle(&s, &ds), 0, DEFAULT_BINS, 199, 5, Execution::Parallel)
            .unwrap();
        assert_eq!(r.strata.len(), 16);
        assert!(r.skipped.is_empty());
        assert!(r.approximate);
        assert!(r.rejection_fraction <= 0.15, "{}", r.rejection_fraction);
    }

    #[test]
    fn single_bin_pools_everything() {
        let s = ScmSetting::new(Treatment::T1, Outcome::O2);
        let ds = gen_observational(&s, 300, 6).unwrap();
        let r = conditional_independence_check(&ds, &oracle(&s, &ds), 0, 1, 99, 5, Execution::Sequential).unwrap();
        assert_eq!(r.strata.len(), 1);
        assert_eq!(r.strata[0].size, 300);
        assert!(r.approximate);
    }

    #[test]
    fn tiny_strata_are_skipped() {
        let s = ScmSetting::new(Treatment::T1, Outcome::O2);
        let ds = gen_observational(&s, 100, 7).unwrap();
        let err = conditional_independence_check(&ds, &oracle(&s, &ds), 0, 4, 99, 5, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Stratification(_)));
        let r = conditional_independence_check(&ds, &oracle(&s, &ds), 0, 2, 99, 5, Execution::Sequential).unwrap();
        assert_eq!(r.strata.len(), 4);
    }

    #[test]
    fn covariates_split_strata() {
        let s = ScmSetting::new(Treatment::T1, Outcome::O2).with_covariate();
        let ds = gen_observational(&s, 2000, 8).unwrap();
        let r = conditional_independence_check(&ds, &oracle(&s, &ds), 0, 3, 99, 5, Execution::Sequential).unwrap();
        assert!(r.covariates_stratified);
        assert_eq!(r.strata.len() + r.skipped.len(), 18);
    }
}
