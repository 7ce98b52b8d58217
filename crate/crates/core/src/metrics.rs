//! Scores against oracles and the dependence statistics used by the
//! diagnostics.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Default number of random directions for the sliced distance.
pub const DEFAULT_PROJECTIONS: usize = 128;
/// Default number of permutations for the distance-correlation test.
pub const DEFAULT_PERMUTATIONS: usize = 199;
/// Asymptotic 95% critical value of the scaled one-sample KS statistic.
pub const KS_CRITICAL_95: f64 = 1.36;

/// Per-point errors and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: String,
    pub per_point: Vec<f64>,
    pub aggregate: f64,
}

/// Mean squared deviation over the grid.
pub fn grid_mse(estimate: &[f64], oracle: &[f64]) -> Result<ScoreReport> {
    if estimate.len() != oracle.len() {
        return Err(Error::Shape(format!(
            "estimate has {} points, oracle {}",
            estimate.len(),
            oracle.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::EmptyData("no grid points to score".into()));
    }
    let per_point: Vec<f64> = estimate.iter().zip(oracle).map(|(e, o)| (e - o).powi(2)).collect();
    let aggregate = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(ScoreReport { metric: "mse".into(), per_point, aggregate })
}

/// Wasserstein-1 distance `int |F_a - F_b|` between two empirical laws.
/// Inputs must be sorted ascending.
pub fn wasserstein1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < na || j < nb {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let fa = i as f64 / na as f64;
        let fb = j as f64 / nb as f64;
        total += (fa - fb).abs() * (next - prev);
        prev = next;
        while i < na && a[i] == next {
            i += 1;
        }
        while j < nb && b[j] == next {
            j += 1;
        }
    }
    total
}

/// Wasserstein-1 distance between two unsorted samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyData("empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(wasserstein1_sorted(&a, &b))
}

/// Mean of the 1-D Wasserstein-1 distances between the projections of two
/// `m x K` samples onto `projections` random unit directions.
pub fn sliced_wasserstein(a: &DMatrix<f64>, b: &DMatrix<f64>, projections: usize, seed: u64) -> Result<f64> {
    let k = a.ncols();
    if k == 0 || b.ncols() != k {
        return Err(Error::Shape(format!("samples have {} and {} columns", k, b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyData("empty sample".into()));
    }
    if projections == 0 {
        return Err(Error::Config("need at least one projection".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut theta = vec![0.0; k];
    let project = |m: &DMatrix<f64>, theta: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = (0..m.nrows())
            .map(|r| theta.iter().enumerate().map(|(c, t)| m[(r, c)] * t).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    for _ in 0..projections {
        loop {
            for t in theta.iter_mut() {
                *t = StandardNormal.sample(&mut rng);
            }
            let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
            if norm > 1e-12 {
                theta.iter_mut().for_each(|t| *t /= norm);
                break;
            }
        }
        total += wasserstein1_sorted(&project(a, &theta), &project(b, &theta));
    }
    Ok(total / projections as f64)
}

/// One-sample Kolmogorov–Smirnov statistic against `Unif(0, 1)`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| (u - i as f64 / n).max((i + 1) as f64 / n - u))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitCheck {
    pub ks_statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// KS test of the control values against uniformity at the 95% level.
pub fn pit_uniformity(v: &[f64]) -> Result<PitCheck> {
    if v.len() < 5 {
        return Err(Error::InsufficientData { needed: 5, got: v.len() });
    }
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!("value {bad} outside [0, 1]")));
    }
    let ks_statistic = ks_uniform(v);
    let threshold = KS_CRITICAL_95 / (v.len() as f64).sqrt();
    Ok(PitCheck { ks_statistic, threshold, pass: ks_statistic < threshold })
}

/// Fenwick tree over four running sums.
struct Fenwick {
    tree: Vec<[f64; 4]>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![[0.0; 4]; n + 1] }
    }

    fn add(&mut self, pos: usize, v: [f64; 4]) {
        let mut i = pos + 1;
        while i < self.tree.len() {
            for (t, x) in self.tree[i].iter_mut().zip(v) {
                *t += x;
            }
            i += i & i.wrapping_neg();
        }
    }

    /// Sums over positions `0..=pos`.
    fn prefix(&self, pos: usize) -> [f64; 4] {
        let mut out = [0.0; 4];
        let mut i = pos + 1;
        while i > 0 {
            for (o, t) in out.iter_mut().zip(self.tree[i]) {
                *o += t;
            }
            i &= i - 1;
        }
        out
    }
}

/// Precomputed order of one variable, reused across permutations of the
/// other.
struct Sorted1d {
    values: Vec<f64>,
    order: Vec<usize>,
    rank: Vec<usize>,
    row_sums: Vec<f64>,
    total: f64,
}

impl Sorted1d {
    fn new(raw: &[f64]) -> Self {
        let n = raw.len();
        let centre = raw.iter().sum::<f64>() / n as f64;
        let values: Vec<f64> = raw.iter().map(|v| v - centre).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        // Dense ranks with ties sharing a rank.
        let mut rank = vec![0; n];
        let mut r = 0;
        for p in 0..n {
            if p > 0 && values[order[p]] != values[order[p - 1]] {
                r += 1;
            }
            rank[order[p]] = r;
        }
        // sum_j |v_i - v_j| from prefix sums over the sorted order.
        let sum: f64 = values.iter().sum();
        let mut row_sums = vec![0.0; n];
        let mut below = 0.0;
        for (p, &i) in order.iter().enumerate() {
            let v = values[i];
            row_sums[i] = v * p as f64 - below + (sum - below - v) - v * (n - p - 1) as f64;
            below += v;
        }
        let total = row_sums.iter().sum();
        Self { values, order, rank, row_sums, total }
    }
}

/// `sum_{i,j} |x_i - x_j| |y_i - y_j|` in `O(n log n)`, walking `x` in
/// sorted order and keeping sums over earlier points in a Fenwick tree keyed
/// by the rank of `y`.
fn cross_distance_sum(x: &Sorted1d, y: &Sorted1d, y_index: &[usize]) -> f64 {
    let n = x.values.len();
    let mut tree = Fenwick::new(n);
    let mut all = [0.0; 4];
    let mut total = 0.0;
    for &i in &x.order {
        let xi = x.values[i];
        let yi = y.values[y_index[i]];
        let low = tree.prefix(y.rank[y_index[i]]);
        // For earlier j: (x_i - x_j)(y_i - y_j) expanded as
        // x_i y_i c - x_i S_y - y_i S_x + S_xy, signed by the order of y.
        let term = |s: [f64; 4]| xi * yi * s[0] - xi * s[1] - yi * s[2] + s[3];
        let high = [all[0] - low[0], all[1] - low[1], all[2] - low[2], all[3] - low[3]];
        total += term(low) - term(high);
        let entry = [1.0, yi, xi, xi * yi];
        tree.add(y.rank[y_index[i]], entry);
        for (a, e) in all.iter_mut().zip(entry) {
            *a += e;
        }
    }
    2.0 * total
}

/// Squared distance covariance (V-statistic) with `y` read through
/// `y_index`.
fn dcov2(x: &Sorted1d, y: &Sorted1d, y_index: &[usize]) -> f64 {
    let n = x.values.len() as f64;
    let cross = cross_distance_sum(x, y, y_index);
    let rows: f64 = (0..x.values.len()).map(|i| x.row_sums[i] * y.row_sums[y_index[i]]).sum();
    cross / (n * n) - 2.0 * rows / (n * n * n) + x.total * y.total / (n * n * n * n)
}

fn dcor_from(x: &Sorted1d, y: &Sorted1d, y_index: &[usize], denom: f64) -> f64 {
    (dcov2(x, y, y_index).max(0.0) / denom).sqrt().min(1.0)
}

/// Sample distance correlation of two scalar samples.
pub fn distance_correlation_stat(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (sx, sy) = (Sorted1d::new(x), Sorted1d::new(y));
    let id: Vec<usize> = (0..x.len()).collect();
    let denom = (dcov2(&sx, &sx, &id) * dcov2(&sy, &sy, &id)).sqrt();
    Ok(dcor_from(&sx, &sy, &id, denom))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("samples of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 5 {
        return Err(Error::InsufficientData { needed: 5, got: x.len() });
    }
    for (name, s) in [("first", x), ("second", y)] {
        if s.iter().all(|v| *v == s[0]) {
            return Err(Error::Degenerate(format!("{name} sample is constant")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcorTest {
    pub dcor: f64,
    pub p_value: f64,
}

/// Distance correlation with a permutation p-value
/// `(1 + #{permuted >= observed}) / (1 + permutations)`. Permutation `b`
/// shuffles `y` with its own random stream, so the result does not depend
/// on the execution strategy.
pub fn distance_correlation(
    x: &[f64],
    y: &[f64],
    permutations: usize,
    seed: u64,
    exec: Execution,
) -> Result<DcorTest> {
    check_pair(x, y)?;
    if permutations < 99 {
        return Err(Error::Config(format!("need at least 99 permutations, got {permutations}")));
    }
    let (sx, sy) = (Sorted1d::new(x), Sorted1d::new(y));
    let n = x.len();
    let id: Vec<usize> = (0..n).collect();
    let denom = (dcov2(&sx, &sx, &id) * dcov2(&sy, &sy, &id)).sqrt();
    let dcor = dcor_from(&sx, &sy, &id, denom);
    let exceed = exec
        .map(permutations, |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let mut perm = id.clone();
            perm.shuffle(&mut rng);
            dcor_from(&sx, &sy, &perm, denom) >= dcor
        })
        .into_iter()
        .filter(|&e| e)
        .count();
    Ok(DcorTest { dcor, p_value: (1 + exceed) as f64 / (1 + permutations) as f64 })
}
