//! Joint interventional laws of several outcomes from their marginal
//! interventional CDFs and an `x`-invariant working copula.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pipeline::{
    interpolate_cdf, interventional_cdf, row_quantile, CfFit, Conditioning, EvaluationGrid, InterventionalCdf,
    VIntegration,
};
use crate::stats::{average_ranks, linspace, norm_cdf, norm_quantile};

/// Smallest eigenvalue kept when projecting onto correlation matrices.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Off-diagonals are clipped to this magnitude before sampling.
pub const MAX_SAMPLING_CORRELATION: f64 = 1.0 - 1e-6;
/// Lattice points of the quasi-Monte Carlo orthant probability for `K > 2`.
pub const QMC_POINTS: usize = 1 << 13;
/// Intervention levels of the grid used for interventional pseudo-scores.
pub const SCORE_X_POINTS: usize = 64;

/// How pseudo-observations of the outcome noise are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// `F_{Y_k(x_i)}(y_ik)`: each outcome through its estimated
    /// interventional CDF at the observed treatment.
    #[default]
    Interventional,
    /// `F_{Y_k | X, V, W}(y_ik | x_i, v_i, w_i)`: second-stage PIT.
    ConditionalPit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CopulaModel {
    Independence { k: usize },
    Gaussian { correlation: DMatrix<f64> },
}

impl CopulaModel {
    pub fn k(&self) -> usize {
        match self {
            CopulaModel::Independence { k } => *k,
            CopulaModel::Gaussian { correlation } => correlation.nrows(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CopulaModel::Independence { .. } => "independence",
            CopulaModel::Gaussian { .. } => "gaussian",
        }
    }

    /// A Gaussian copula from a valid correlation matrix.
    pub fn gaussian(correlation: DMatrix<f64>) -> Result<Self> {
        let k = correlation.nrows();
        if k < 2 || correlation.ncols() != k {
            return Err(Error::Shape(format!("correlation must be square with K >= 2, got {k}x{}", correlation.ncols())));
        }
        for i in 0..k {
            if (correlation[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidData("correlation diagonal must be one".into()));
            }
            for j in 0..k {
                let c = correlation[(i, j)];
                if !(-1.0..=1.0).contains(&c) || (c - correlation[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidData("correlation must be symmetric with entries in [-1, 1]".into()));
                }
            }
        }
        if SymmetricEigen::new(correlation.clone()).eigenvalues.min() < -1e-9 {
            return Err(Error::InvalidData("correlation is not positive semidefinite".into()));
        }
        Ok(CopulaModel::Gaussian { correlation })
    }

    pub fn off_diagonal(&self, i: usize, j: usize) -> f64 {
        match self {
            CopulaModel::Independence { .. } => f64::from(i == j),
            CopulaModel::Gaussian { correlation } => correlation[(i, j)],
        }
    }
}

/// Pseudo-uniform scores of the training outcomes, `n x K`.
pub fn pseudo_uniform_scores(fit: &CfFit, ds: &Dataset, kind: ScoreKind, exec: Execution) -> Result<DMatrix<f64>> {
    let (n, k) = (ds.n(), fit.k());
    if k < 2 {
        return Err(Error::Shape(format!("pseudo-scores need at least two outcomes, got {k}")));
    }
    if fit.n() != n || ds.k() != k {
        return Err(Error::Shape("fit and dataset disagree in size".into()));
    }
    let mut u = DMatrix::zeros(n, k);
    match kind {
        ScoreKind::ConditionalPit => {
            for (j, model) in fit.second_stage.iter().enumerate() {
                let col = exec.map(n, |i| model.eval_cdf(&fit.second_stage_features(ds.x()[i], i), ds.y()[(i, j)]));
                for (i, v) in col.into_iter().enumerate() {
                    u[(i, j)] = v?;
                }
            }
        }
        ScoreKind::Interventional => {
            let x_grid = score_x_grid(ds);
            let curves = (0..k)
                .map(|j| {
                    let y_grid = fit.second_stage[j].support().grid(crate::pipeline::DEFAULT_Y_POINTS);
                    let grid = EvaluationGrid::new(x_grid.clone(), y_grid)?;
                    interventional_cdf(fit, &grid, j, &Conditioning::Marginal, VIntegration::Empirical, exec)
                })
                .collect::<Result<Vec<_>>>()?;
            u = curve_scores(&curves, ds)?;
        }
    }
    Ok(u)
}

/// [`SCORE_X_POINTS`] levels spanning the observed treatment range.
pub fn score_x_grid(ds: &Dataset) -> Vec<f64> {
    let (lo, hi) = ds.x().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi > lo { linspace(lo, hi, SCORE_X_POINTS) } else { vec![lo] }
}

/// `u_ik = F_k(y_ik | x_i)` from one CDF curve per outcome, interpolated
/// linearly between x levels.
pub fn curve_scores(curves: &[InterventionalCdf], ds: &Dataset) -> Result<DMatrix<f64>> {
    if curves.len() != ds.k() {
        return Err(Error::Shape(format!("{} curves for {} outcomes", curves.len(), ds.k())));
    }
    Ok(DMatrix::from_fn(ds.n(), ds.k(), |i, j| bilinear(&curves[j], ds.x()[i], ds.y()[(i, j)])))
}

/// Interventional CDF at `(x, y)`, linear in `x` between grid rows and
/// clamped to the end rows.
fn bilinear(icdf: &InterventionalCdf, x: f64, y: f64) -> f64 {
    let xs = &icdf.x_grid;
    let g = xs.len();
    if g == 1 || x <= xs[0] {
        return icdf.eval(0, y);
    }
    if x >= xs[g - 1] {
        return icdf.eval(g - 1, y);
    }
    let r = xs.partition_point(|&v| v <= x);
    let t = (x - xs[r - 1]) / (xs[r] - xs[r - 1]);
    (1.0 - t) * icdf.eval(r - 1, y) + t * icdf.eval(r, y)
}

/// Nearest correlation matrix by eigenvalue clipping at [`EIGEN_FLOOR`]
/// and rescaling to a unit diagonal.
pub fn nearest_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let k = rebuilt.nrows();
    let d: Vec<f64> = (0..k).map(|i| rebuilt[(i, i)].sqrt()).collect();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j { 1.0 } else { (rebuilt[(i, j)] / (d[i] * d[j])).clamp(-1.0, 1.0) }
    })
}

/// Gaussian copula from scores: each column is replaced by its average
/// ranks over `n + 1` (which lie in `[1/(n+1), n/(n+1)]`), mapped through
/// `Phi^-1`, and the sample correlation of the result is projected onto
/// the valid correlation matrices. Depends on the scores only through their
/// ranks.
pub fn fit_gaussian_copula(u: &DMatrix<f64>) -> Result<CopulaModel> {
    let (n, k) = u.shape();
    if k < 2 {
        return Err(Error::Shape(format!("need at least two score columns, got {k}")));
    }
    if n < k + 2 {
        return Err(Error::InsufficientData { needed: k + 2, got: n });
    }
    if u.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("scores must lie in [0, 1]".into()));
    }
    let mut scores = DMatrix::zeros(n, k);
    for j in 0..k {
        let col: Vec<f64> = u.column(j).iter().copied().collect();
        if col.iter().all(|v| *v == col[0]) {
            return Err(Error::Degenerate(format!("score column {j} is constant")));
        }
        for (i, r) in average_ranks(&col).into_iter().enumerate() {
            scores[(i, j)] = norm_quantile(r / (n as f64 + 1.0));
        }
    }
    let means: Vec<f64> = (0..k).map(|j| scores.column(j).mean()).collect();
    let cov = DMatrix::from_fn(k, k, |a, b| {
        (0..n).map(|i| (scores[(i, a)] - means[a]) * (scores[(i, b)] - means[b])).sum::<f64>()
    });
    let raw = DMatrix::from_fn(k, k, |a, b| cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt());
    let correlation = nearest_correlation(&raw);
    let smallest = SymmetricEigen::new(correlation.clone()).eigenvalues.min();
    if smallest < 1e-6 {
        warn!("fitted copula correlation is nearly singular (smallest eigenvalue {smallest:.2e})");
    }
    Ok(CopulaModel::Gaussian { correlation })
}

/// One intervention level: the marginal CDF rows of every outcome and the
/// working copula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointInterventional {
    pub x: f64,
    pub y_grids: Vec<Vec<f64>>,
    pub marginals: Vec<Vec<f64>>,
    pub copula: CopulaModel,
}

impl JointInterventional {
    /// Level `g` of per-outcome interventional CDFs that share an x grid.
    pub fn from_curves(curves: &[InterventionalCdf], g: usize, copula: CopulaModel) -> Result<Self> {
        let k = curves.len();
        if k < 2 || copula.k() != k {
            return Err(Error::Shape(format!("{k} marginals for a {}-dimensional copula", copula.k())));
        }
        let x = *curves[0]
            .x_grid
            .get(g)
            .ok_or_else(|| Error::Grid(format!("level {g} outside the x grid")))?;
        if curves.iter().any(|c| c.x_grid.get(g) != Some(&x)) {
            return Err(Error::Grid("marginals do not share the intervention level".into()));
        }
        Ok(Self {
            x,
            y_grids: curves.iter().map(|c| c.y_grid.clone()).collect(),
            marginals: curves.iter().map(|c| c.cdf[g].clone()).collect(),
            copula,
        })
    }

    pub fn k(&self) -> usize {
        self.marginals.len()
    }

    fn marginal_values(&self, y: &[f64]) -> Vec<f64> {
        (0..self.k()).map(|k| interpolate_cdf(&self.y_grids[k], &self.marginals[k], y[k])).collect()
    }
}

/// `P(Y(x) <= y)` under the copula.
pub fn joint_cdf(j: &JointInterventional, y: &[f64]) -> Result<f64> {
    if y.len() != j.k() {
        return Err(Error::Shape(format!("point has {} coordinates, law has {}", y.len(), j.k())));
    }
    let u = j.marginal_values(y);
    Ok(match &j.copula {
        CopulaModel::Independence { .. } => u.iter().product(),
        CopulaModel::Gaussian { correlation } => gaussian_copula_cdf(correlation, &u),
    })
}

/// `C(u)` for the Gaussian copula with the given correlation.
pub fn gaussian_copula_cdf(correlation: &DMatrix<f64>, u: &[f64]) -> f64 {
    if u.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    // Coordinates at one drop out of the orthant.
    let active: Vec<usize> = (0..u.len()).filter(|&i| u[i] < 1.0).collect();
    match active.len() {
        0 => 1.0,
        1 => u[active[0]],
        2 => {
            let (a, b) = (active[0], active[1]);
            bivariate_normal_cdf(norm_quantile(u[a]), norm_quantile(u[b]), correlation[(a, b)])
        }
        _ => {
            let sub = DMatrix::from_fn(active.len(), active.len(), |i, j| correlation[(active[i], active[j])]);
            let z: Vec<f64> = active.iter().map(|&i| norm_quantile(u[i])).collect();
            orthant_qmc(&sub, &z)
        }
    }
}

const GL6: ([f64; 3], [f64; 3]) = (
    [0.171_324_492_379_170_5, 0.360_761_573_048_138_4, 0.467_913_934_572_690_4],
    [0.932_469_514_203_152_2, 0.661_209_386_466_264_7, 0.238_619_186_083_197],
);
const GL12: ([f64; 6], [f64; 6]) = (
    [
        0.047_175_336_386_511_77,
        0.106_939_325_995_318_3,
        0.160_078_328_543_346_4,
        0.203_167_426_723_065_9,
        0.233_492_536_538_354_7,
        0.249_147_045_813_402_9,
    ],
    [
        0.981_560_634_246_719_1,
        0.904_117_256_370_475,
        0.769_902_674_194_305,
        0.587_317_954_286_617_1,
        0.367_831_498_998_180_2,
        0.125_233_408_511_469_2,
    ],
);
const GL20: ([f64; 10], [f64; 10]) = (
    [
        0.017_614_007_139_152_12,
        0.040_601_429_800_386_94,
        0.062_672_048_334_109_06,
        0.083_276_741_576_704_75,
        0.101_930_119_817_240_4,
        0.118_194_531_961_518_4,
        0.131_688_638_449_176_6,
        0.142_096_109_318_382_1,
        0.149_172_986_472_603_7,
        0.152_753_387_130_725_9,
    ],
    [
        0.993_128_599_185_094_9,
        0.963_971_927_277_913_8,
        0.912_234_428_251_326,
        0.839_116_971_822_218_8,
        0.746_331_906_460_150_8,
        0.636_053_680_726_515,
        0.510_867_001_950_827_1,
        0.373_706_088_715_419_6,
        0.227_785_851_141_645_1,
        0.076_526_521_133_497_33,
    ],
);

/// `P(X > h, Y > k)` for a standard bivariate normal with correlation `r`
/// (Drezner–Wesolowsky with Genz's refinements, double precision).
fn bivariate_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { norm_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return norm_cdf(-h);
    }
    if r == 0.0 {
        return norm_cdf(-h) * norm_cdf(-k);
    }
    let (w, x): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&GL6.0, &GL6.1)
    } else if r.abs() < 0.75 {
        (&GL12.0, &GL12.1)
    } else {
        (&GL20.0, &GL20.1)
    };
    // Nodes 1 - x and 1 + x, each with weight w.
    let nodes = || w.iter().zip(x).flat_map(|(&wi, &xi)| [(wi, 1.0 - xi), (wi, 1.0 + xi)]);
    let tp = 2.0 * std::f64::consts::PI;
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin() / 2.0;
        for (wi, xi) in nodes() {
            let sn = (asr * xi).sin();
            bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        bvn = bvn * asr / tp + norm_cdf(-h) * norm_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = 1.0 - r * r;
            let mut a = as_.sqrt();
            let bs = (h - k).powi(2);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 80.0;
            let asr = -(bs / as_ + hk) / 2.0;
            if asr > -100.0 {
                bvn = a * asr.exp() * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_);
            }
            if hk > -100.0 {
                let b = bs.sqrt();
                let sp = tp.sqrt() * norm_cdf(-b / a);
                bvn -= (-hk / 2.0).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0);
            }
            a /= 2.0;
            let mut sum = 0.0;
            for (wi, xi) in nodes() {
                let xs = (a * xi).powi(2);
                let asr = -(bs / xs + hk) / 2.0;
                if asr > -100.0 {
                    let sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
                    let rs = (1.0 - xs).sqrt();
                    let ep = (-(hk / 2.0) * xs / (1.0 + rs).powi(2)).exp() / rs;
                    sum += wi * asr.exp() * (sp - ep);
                }
            }
            bvn = (a * sum - bvn) / tp;
        }
        if r > 0.0 {
            bvn += norm_cdf(-h.max(k));
        } else if h >= k {
            bvn = -bvn;
        } else {
            let l = if h < 0.0 { norm_cdf(k) - norm_cdf(h) } else { norm_cdf(-h) - norm_cdf(-k) };
            bvn = l - bvn;
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// `P(X <= h, Y <= k)` for a standard bivariate normal with correlation `r`.
pub fn bivariate_normal_cdf(h: f64, k: f64, r: f64) -> f64 {
    bivariate_upper(-h, -k, r)
}

/// `P(Z <= b)` for `Z ~ N(0, correlation)` by Genz's sequential
/// conditioning over a rank-1 Kronecker lattice of [`QMC_POINTS`] points.
pub fn orthant_qmc(correlation: &DMatrix<f64>, b: &[f64]) -> f64 {
    let k = b.len();
    let l = match correlation.clone().cholesky() {
        Some(c) => c.l(),
        None => nearest_correlation(correlation).cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(k, k)),
    };
    // Square roots of primes give the lattice generator; a fixed shift
    // keeps the result deterministic.
    const ROOTS: [f64; 12] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0];
    let alpha: Vec<f64> = (0..k).map(|i| ROOTS[i % ROOTS.len()].sqrt().fract() + (i / ROOTS.len()) as f64 * 0.1).collect();
    let mut y = vec![0.0; k];
    let mut total = 0.0;
    for p in 0..QMC_POINTS {
        let mut e = norm_cdf(b[0] / l[(0, 0)]);
        let mut prod = e;
        for i in 1..k {
            if prod <= 0.0 {
                break;
            }
            let w = ((p as f64 + 0.5) * alpha[i - 1]).fract();
            y[i - 1] = norm_quantile((w * e).clamp(1e-300, 1.0 - 1e-16));
            let s: f64 = (0..i).map(|j| l[(i, j)] * y[j]).sum();
            e = norm_cdf((b[i] - s) / l[(i, i)].max(1e-12));
            prod *= e;
        }
        total += prod;
    }
    total / QMC_POINTS as f64
}

/// `m` draws from the joint law: correlated normals through `Phi`, then
/// each marginal inverted on its grid.
pub fn sample_joint(j: &JointInterventional, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let k = j.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chol = match &j.copula {
        CopulaModel::Independence { .. } => DMatrix::identity(k, k),
        CopulaModel::Gaussian { correlation } => {
            let clipped = DMatrix::from_fn(k, k, |a, b| {
                if a == b {
                    1.0
                } else {
                    correlation[(a, b)].clamp(-MAX_SAMPLING_CORRELATION, MAX_SAMPLING_CORRELATION)
                }
            });
            let c = clipped.clone().cholesky().map(|c| c.l());
            match c {
                Some(l) => l,
                None => nearest_correlation(&clipped)
                    .cholesky()
                    .map(|c| c.l())
                    .ok_or_else(|| Error::Singular("copula correlation has no Cholesky factor".into()))?,
            }
        }
    };
    let mut out = DMatrix::zeros(m, k);
    let mut n = vec![0.0; k];
    for r in 0..m {
        for v in n.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for a in 0..k {
            let z: f64 = (0..=a).map(|b| chol[(a, b)] * n[b]).sum();
            let u = norm_cdf(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            out[(r, a)] = row_quantile(&j.y_grids[a], &j.marginals[a], u);
        }
    }
    Ok(out)
}
