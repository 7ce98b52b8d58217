//! Run configuration: a TOML or JSON file, then command-line overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use cfdist::cdfreg::{BackboneConfig, BackboneKind, Bandwidth};
use cfdist::dataset::ColumnRoles;
use cfdist::dgp::{derive_seed, InstrumentLaw, Outcome, ScmSetting, Treatment};
use cfdist::pipeline::{ControlScale, VIntegration};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "CFDIST_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Tabcf,
    Naive,
    LinearCf,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Tabcf => "tabcf",
            Estimator::Naive => "naive",
            Estimator::LinearCf => "linear-cf",
        }
    }
}

impl FromStr for Estimator {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "tabcf" => Ok(Self::Tabcf),
            "naive" => Ok(Self::Naive),
            "linear-cf" => Ok(Self::LinearCf),
            other => Err(CliError::Config(format!(
                "unknown estimator '{other}' (expected tabcf, naive or linear-cf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct Functionals {
    pub mean: bool,
    pub quantiles: Vec<f64>,
    pub gini: bool,
    /// Joint law of all outcomes; needs at least two.
    pub joint: bool,
}

impl Default for Functionals {
    fn default() -> Self {
        Self { mean: true, quantiles: Vec::new(), gini: false, joint: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct GridConfig {
    pub x_points: usize,
    pub y_points: usize,
    /// Fraction trimmed from each end of the treatment distribution.
    pub trim: f64,
    pub joint_x_points: usize,
    pub joint_x_min: f64,
    pub joint_x_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { x_points: 200, y_points: 512, trim: 0.05, joint_x_points: 13, joint_x_min: 0.0, joint_x_max: 3.0 }
    }
}

impl GridConfig {
    pub fn joint_x_grid(&self) -> Vec<f64> {
        if self.joint_x_points == 1 {
            return vec![0.5 * (self.joint_x_min + self.joint_x_max)];
        }
        cfdist::stats::linspace(self.joint_x_min, self.joint_x_max, self.joint_x_points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct OracleConfig {
    /// Interventional draws per grid point for mean and quantile oracles.
    pub mc_draws: usize,
    /// Draws per intervention level for joint laws, on both the oracle and
    /// the estimated side.
    pub joint_draws: usize,
    pub projections: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { mc_draws: 5000, joint_draws: 5000, projections: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub permutations: usize,
    pub conditional: bool,
    pub bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { permutations: 199, conditional: false, bins: 4 }
    }
}

/// A CSV file and the roles of its columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DataSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub instrument: String,
    #[serde(default)]
    pub treatment: String,
    #[serde(default)]
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl DataSpec {
    pub fn roles(&self) -> ColumnRoles {
        ColumnRoles {
            instrument: self.instrument.clone(),
            treatment: self.treatment.clone(),
            outcomes: self.outcomes.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub settings: Vec<ScmSetting>,
    pub data: Option<DataSpec>,
    pub n: usize,
    pub seed: u64,
    pub replications: usize,
    /// Explicit replication seeds; when empty they are derived from `seed`.
    pub seeds: Vec<u64>,
    pub backbone: BackboneConfig,
    pub estimators: Vec<Estimator>,
    pub functionals: Functionals,
    pub grid: GridConfig,
    pub v_integration: VIntegration,
    pub control_scale: ControlScale,
    /// 0 for full-sample controls.
    pub cross_fit_folds: usize,
    pub oracle: OracleConfig,
    pub diagnostics: DiagnosticsConfig,
    pub workers: Option<usize>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            settings: Vec::new(),
            data: None,
            n: 4000,
            seed: 0,
            replications: 1,
            seeds: Vec::new(),
            backbone: BackboneConfig::default(),
            estimators: vec![Estimator::Tabcf],
            functionals: Functionals::default(),
            grid: GridConfig::default(),
            v_integration: VIntegration::default(),
            control_scale: ControlScale::default(),
            cross_fit_folds: 0,
            oracle: OracleConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            workers: None,
            output: PathBuf::from("cfdist-out"),
        }
    }
}

impl RunConfig {
    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn replication_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.replications as u64).map(|r| derive_seed(self.seed, r)).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
            .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
            .filter(|&w| w > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        for s in &self.settings {
            s.validate().map_err(|e| CliError::Config(format!("setting {}: {e}", s.label())))?;
        }
        self.backbone.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(t) = self.functionals.quantiles.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("quantile level {t} outside (0, 1)"));
        }
        if self.replications == 0 && self.seeds.is_empty() {
            return bad("replications must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("no estimator selected".into());
        }
        if self.n < 10 {
            return bad(format!("sample size {} is too small", self.n));
        }
        if self.grid.x_points == 0 || self.grid.y_points < 2 || self.grid.joint_x_points == 0 {
            return bad("grid sizes must be positive (y grid at least 2)".into());
        }
        if !(0.0..0.5).contains(&self.grid.trim) {
            return bad(format!("trim {} outside [0, 0.5)", self.grid.trim));
        }
        if self.grid.joint_x_points > 1 && self.grid.joint_x_max <= self.grid.joint_x_min {
            return bad("joint x range is empty".into());
        }
        if self.cross_fit_folds == 1 {
            return bad("cross-fitting needs at least 2 folds (0 disables it)".into());
        }
        if self.oracle.mc_draws < 100 || self.oracle.joint_draws < 100 || self.oracle.projections == 0 {
            return bad("oracle needs at least 100 draws and one projection".into());
        }
        if self.diagnostics.permutations < 99 {
            return bad("distance-correlation test needs at least 99 permutations".into());
        }
        if self.diagnostics.bins < 1 {
            return bad("stratification needs at least one bin".into());
        }
        Ok(())
    }

    /// The one data source of `fit` and `diagnose`.
    pub fn single_source(&self) -> CliResult<Source<'_>> {
        match (&self.data, self.settings.as_slice()) {
            (Some(d), []) => Ok(Source::Csv(d)),
            (None, [s]) => Ok(Source::Simulated(s)),
            (None, []) => Err(CliError::Config("no data: give a setting or a CSV file".into())),
            (Some(_), _) => Err(CliError::Config("give either a CSV file or a setting, not both".into())),
            (None, _) => Err(CliError::Config("this command takes exactly one setting".into())),
        }
    }
}

pub enum Source<'a> {
    Simulated(&'a ScmSetting),
    Csv(&'a DataSpec),
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, T::Err> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(T::from_str).collect()
}

/// Flags that override the configuration file. Unset flags leave the file
/// (or the built-in default) in place.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML or JSON run configuration.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Output directory [default: cfdist-out].
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Treatment design: t1, t2, linear-sanity, weak-t1, weak-t2.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Outcome design: o1, o2, o3, linear-sanity, bo1, bo2, bo3, bo4.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Instrument law: normal or uniform [default: normal].
    #[arg(long)]
    pub instrument_law: Option<String>,
    /// Instrument relevance of the weak-IV treatments.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Noise correlation of the bivariate outcomes.
    #[arg(long)]
    pub rho_eps: Option<f64>,
    /// Add one observed pretreatment covariate.
    #[arg(long)]
    pub covariate: bool,
    /// Observational CSV instead of a simulated setting.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Instrument column of the CSV.
    #[arg(long)]
    pub instrument_col: Option<String>,
    /// Treatment column of the CSV.
    #[arg(long)]
    pub treatment_col: Option<String>,
    /// Comma-separated outcome columns of the CSV.
    #[arg(long)]
    pub outcome_cols: Option<String>,
    /// Comma-separated covariate columns of the CSV.
    #[arg(long)]
    pub covariate_cols: Option<String>,
    /// Sample size per replication [default: 4000].
    #[arg(long, short = 'n')]
    pub n: Option<usize>,
    /// Root seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of replications [default: 1].
    #[arg(long, short = 'r')]
    pub replications: Option<usize>,
    /// Conditional-CDF backbone: gaussian-linear, kernel-empirical or binned-histogram [default: gaussian-linear].
    #[arg(long)]
    pub backbone: Option<String>,
    /// Kernel bandwidth: rule-of-thumb, cross-validated, or a number in standardized units [default: rule-of-thumb].
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// Comma-separated estimators: tabcf, naive, linear-cf [default: tabcf].
    #[arg(long)]
    pub estimators: Option<String>,
    /// Comma-separated quantile levels in (0, 1).
    #[arg(long)]
    pub taus: Option<String>,
    /// Also estimate the interventional Gini index.
    #[arg(long)]
    pub gini: bool,
    /// Also estimate the joint law of all outcomes.
    #[arg(long)]
    pub joint: bool,
    /// Intervention levels on the trimmed treatment range [default: 200].
    #[arg(long)]
    pub x_points: Option<usize>,
    /// Outcome grid points [default: 512].
    #[arg(long)]
    pub y_points: Option<usize>,
    /// Intervention levels of the joint law [default: 13].
    #[arg(long)]
    pub joint_x_points: Option<usize>,
    /// Integration over the control: empirical or quadrature [default: empirical].
    #[arg(long)]
    pub v_integration: Option<String>,
    /// Cross-fitting folds for the controls, 0 for full sample [default: 0].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Monte Carlo draws per grid point for the oracle [default: 5000].
    #[arg(long)]
    pub mc_draws: Option<usize>,
    /// Permutations of the distance-correlation test [default: 199].
    #[arg(long)]
    pub permutations: Option<usize>,
    /// Run the stratified conditional-independence check.
    #[arg(long)]
    pub conditional: bool,
    /// Worker threads for replications [default: $CFDIST_WORKERS or all cores].
    #[arg(long, short = 'j')]
    pub workers: Option<usize>,
}

impl Overrides {
    /// The configuration file (if any) with these flags applied, validated.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) -> CliResult<()> {
        let lib = |e: cfdist::Error| CliError::Config(e.to_string());
        self.apply_setting(cfg)?;
        if let Some(path) = &self.data {
            let spec = cfg.data.get_or_insert_with(|| DataSpec {
                path: path.clone(),
                instrument: String::new(),
                treatment: String::new(),
                outcomes: Vec::new(),
                covariates: Vec::new(),
            });
            spec.path = path.clone();
        }
        let roles_given = self.instrument_col.is_some()
            || self.treatment_col.is_some()
            || self.outcome_cols.is_some()
            || self.covariate_cols.is_some();
        if roles_given {
            let spec = cfg
                .data
                .as_mut()
                .ok_or_else(|| CliError::Config("column roles given without a CSV file".into()))?;
            if let Some(c) = &self.instrument_col {
                spec.instrument = c.clone();
            }
            if let Some(c) = &self.treatment_col {
                spec.treatment = c.clone();
            }
            if let Some(c) = &self.outcome_cols {
                spec.outcomes = c.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            }
            if let Some(c) = &self.covariate_cols {
                spec.covariates = c.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            }
        }
        if let Some(v) = &self.output {
            cfg.output = v.clone();
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.replications {
            cfg.replications = v;
            cfg.seeds.clear();
        }
        if let Some(v) = &self.backbone {
            let kind = BackboneKind::from_str(v).map_err(lib)?;
            cfg.backbone = BackboneConfig { kind, ..cfg.backbone.clone() };
        }
        if let Some(v) = &self.bandwidth {
            cfg.backbone.bandwidth = Bandwidth::from_str(v).map_err(lib)?;
        }
        if let Some(v) = &self.estimators {
            cfg.estimators = parse_list(v)?;
        }
        if let Some(v) = &self.taus {
            cfg.functionals.quantiles = parse_list::<f64>(v)
                .map_err(|e| CliError::Config(format!("bad quantile list '{v}': {e}")))?;
        }
        cfg.functionals.gini |= self.gini;
        cfg.functionals.joint |= self.joint;
        if let Some(v) = self.x_points {
            cfg.grid.x_points = v;
        }
        if let Some(v) = self.y_points {
            cfg.grid.y_points = v;
        }
        if let Some(v) = self.joint_x_points {
            cfg.grid.joint_x_points = v;
        }
        if let Some(v) = &self.v_integration {
            cfg.v_integration = VIntegration::from_str(v).map_err(lib)?;
        }
        if let Some(v) = self.folds {
            cfg.cross_fit_folds = v;
        }
        if let Some(v) = self.mc_draws {
            cfg.oracle.mc_draws = v;
        }
        if let Some(v) = self.permutations {
            cfg.diagnostics.permutations = v;
        }
        cfg.diagnostics.conditional |= self.conditional;
        if let Some(v) = self.workers {
            cfg.workers = Some(v);
        }
        Ok(())
    }

    fn apply_setting(&self, cfg: &mut RunConfig) -> CliResult<()> {
        let lib = |e: cfdist::Error| CliError::Config(e.to_string());
        let touched = self.treatment.is_some()
            || self.outcome.is_some()
            || self.instrument_law.is_some()
            || self.kappa.is_some()
            || self.rho_eps.is_some()
            || self.covariate;
        if !touched {
            return Ok(());
        }
        let setting = match cfg.settings.len() {
            0 => {
                let (Some(t), Some(o)) = (&self.treatment, &self.outcome) else {
                    return Err(CliError::Config("a new setting needs both --treatment and --outcome".into()));
                };
                cfg.settings.push(ScmSetting::new(Treatment::from_str(t).map_err(lib)?, Outcome::from_str(o).map_err(lib)?));
                &mut cfg.settings[0]
            }
            1 => &mut cfg.settings[0],
            _ => return Err(CliError::Config("setting flags are ambiguous with several configured settings".into())),
        };
        if let Some(t) = &self.treatment {
            setting.treatment = Treatment::from_str(t).map_err(lib)?;
        }
        if let Some(o) = &self.outcome {
            setting.outcome = Outcome::from_str(o).map_err(lib)?;
        }
        if let Some(l) = &self.instrument_law {
            setting.instrument_law = InstrumentLaw::from_str(l).map_err(lib)?;
        }
        if self.kappa.is_some() {
            setting.kappa = self.kappa;
        }
        if self.rho_eps.is_some() {
            setting.rho_eps = self.rho_eps;
        }
        setting.covariate_augmented |= self.covariate;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            n = 1000
            estimators = ["tabcf", "naive"]
            [[settings]]
            treatment = "t1"
            outcome = "o2"
            [functionals]
            quantiles = [0.1, 0.5]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.n, 1000);
        assert_eq!(cfg.grid.x_points, 200);
        assert_eq!(cfg.grid.joint_x_points, 13);
        assert_eq!(cfg.settings[0], ScmSetting::new(Treatment::T1, Outcome::O2));
        assert!(cfg.functionals.mean);
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_the_file() {
        let o = Overrides {
            treatment: Some("weak-t1".into()),
            outcome: Some("o2".into()),
            kappa: Some(0.15),
            taus: Some("0.25, 0.75".into()),
            estimators: Some("tabcf,linear-cf".into()),
            ..Overrides::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.settings[0].kappa, Some(0.15));
        assert_eq!(cfg.functionals.quantiles, vec![0.25, 0.75]);
        assert_eq!(cfg.estimators, vec![Estimator::Tabcf, Estimator::LinearCf]);
    }

    #[test]
    fn unknown_names_list_the_valid_ones() {
        let o = Overrides { treatment: Some("t9".into()), outcome: Some("o2".into()), ..Overrides::default() };
        let msg = o.resolve().unwrap_err().to_string();
        assert!(msg.contains("t1") && msg.contains("weak-t2"), "{msg}");
        let o = Overrides { taus: Some("0.5,1.5".into()), ..Overrides::default() };
        assert!(matches!(o.resolve(), Err(CliError::Config(_))));
    }

    #[test]
    fn seeds_are_derived_and_distinct() {
        let cfg = RunConfig { replications: 5, ..RunConfig::default() };
        let seeds = cfg.replication_seeds();
        assert_eq!(seeds.len(), 5);
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 5);
    }
}
