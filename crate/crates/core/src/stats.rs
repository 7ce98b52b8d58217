//! Small numerical helpers shared across modules: normal distribution
//! functions, empirical quantiles, ranks and moments.

use std::sync::OnceLock;

use statrs::function::erf::{erfc, erfc_inv};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal CDF, accurate to double precision.
pub fn norm_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-z / SQRT_2)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile. Returns `-inf`/`inf` at 0 and 1.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

const TABLE_LIMIT: f64 = 9.0;
const TABLE_STEPS_PER_UNIT: f64 = 128.0;

struct NormalTable {
    cdf: Vec<f64>,
    pdf: Vec<f64>,
}

fn normal_table() -> &'static NormalTable {
    static TABLE: OnceLock<NormalTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let nodes = (2.0 * TABLE_LIMIT * TABLE_STEPS_PER_UNIT) as usize + 1;
        let mut cdf = Vec::with_capacity(nodes);
        let mut pdf = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let z = -TABLE_LIMIT + i as f64 / TABLE_STEPS_PER_UNIT;
            cdf.push(norm_cdf(z));
            pdf.push(norm_pdf(z));
        }
        NormalTable { cdf, pdf }
    })
}

/// Standard normal CDF by cubic Hermite interpolation of a table with step
/// 1/128 on [-9, 9]. Absolute error is below 2e-11, and the value at every
/// table node (including 0) is exact. Used in the hot loops that evaluate
/// millions of normal CDFs per fit.
#[inline]
pub fn fast_norm_cdf(z: f64) -> f64 {
    if z <= -TABLE_LIMIT {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    if z >= TABLE_LIMIT {
        return 1.0;
    }
    if z > 0.0 {
        // The upper half by symmetry keeps precision (and monotonicity) near 1.
        return 1.0 - fast_norm_cdf(-z);
    }
    let table = normal_table();
    let pos = (z + TABLE_LIMIT) * TABLE_STEPS_PER_UNIT;
    let idx = (pos as usize).min(table.cdf.len() - 2);
    let t = pos - idx as f64;
    if t == 0.0 {
        return table.cdf[idx];
    }
    let h = 1.0 / TABLE_STEPS_PER_UNIT;
    let (p0, p1) = (table.cdf[idx], table.cdf[idx + 1]);
    let (d0, d1) = (table.pdf[idx] * h, table.pdf[idx + 1] * h);
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    (h00 * p0 + h10 * d0 + h01 * p1 + h11 * d1).clamp(0.0, 1.0)
}

/// Empirical quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// 1-based ranks with ties averaged.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with denominator `n - 1` (0 for a single value).
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

pub fn std_dev(values: &[f64]) -> f64 {
    variance(values).sqrt()
}

pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1) as f64
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    covariance(a, b) / (std_dev(a) * std_dev(b))
}

pub fn median(values: &[f64]) -> f64 {
    quantile_type7(&sorted_copy(values), 0.5)
}

/// `n` equally spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_cdf_matches_erfc_reference() {
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let z = -10.0 + i as f64 * 1e-4;
            worst = worst.max((fast_norm_cdf(z) - norm_cdf(z)).abs());
        }
        assert!(worst < 2e-11, "max abs error {worst}");
        assert_eq!(fast_norm_cdf(0.0), 0.5);
    }

    #[test]
    fn fast_cdf_is_monotone() {
        let mut prev = 0.0;
        for i in 0..=400_000 {
            let z = -9.5 + i as f64 * 4.75e-5;
            let c = fast_norm_cdf(z);
            assert!(c >= prev, "non-monotone at {z}");
            prev = c;
        }
    }

    #[test]
    fn normal_quantile_known_values() {
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((norm_quantile(0.9) - 1.281_551_565_544_600_5).abs() < 1e-12);
        assert_eq!(norm_quantile(0.5), 0.0);
        assert!((norm_cdf(norm_quantile(1e-10)) - 1e-10).abs() < 1e-20);
    }

    #[test]
    fn type7_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&s, 0.0), 1.0);
        assert_eq!(quantile_type7(&s, 1.0), 4.0);
        assert!((quantile_type7(&s, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_type7(&s, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(-1.0, 2.0, 4);
        assert_eq!(g, vec![-1.0, 0.0, 1.0, 2.0]);
    }
}
