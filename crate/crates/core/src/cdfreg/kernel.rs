use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Bandwidth, TargetSupport};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rows::Rows;
use crate::stats::{mean, std_dev};

/// Per-coordinate truncation of the Gaussian kernel, in bandwidths. The
/// kernel is the product of per-coordinate truncated Gaussians, so its
/// support is a box.
pub const KERNEL_SUPPORT: f64 = 4.0;

/// Nadaraya–Watson conditional CDF: a kernel-weighted empirical CDF of the
/// training targets, with a product Gaussian kernel on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEmpirical {
    means: Vec<f64>,
    /// Feature sd times bandwidth; 0 for constant features.
    scales: Vec<f64>,
    bandwidth: Vec<f64>,
    /// Training features mapped to kernel units.
    scaled: Rows,
    targets: Vec<f64>,
    /// Training indices in ascending target order.
    order: Vec<u32>,
    min_neighbors: usize,
    support: TargetSupport,
}

impl KernelEmpirical {
    pub(crate) fn fit(features: &Rows, targets: &[f64], config: &BackboneConfig) -> Result<Self> {
        let (n, d) = (targets.len(), features.dim());
        let support = TargetSupport::of(targets);
        if support.range() <= 0.0 {
            return Err(Error::Degenerate("all training targets are identical".into()));
        }
        if config.min_neighbors > n {
            return Err(Error::Config(format!(
                "neighbor count {} exceeds training size {n}",
                config.min_neighbors
            )));
        }
        let mut means = Vec::with_capacity(d);
        let mut sds = Vec::with_capacity(d);
        for k in 0..d {
            let col = features.column(k);
            means.push(mean(&col));
            sds.push(std_dev(&col));
        }
        let rule = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let h = match config.bandwidth {
            Bandwidth::RuleOfThumb => vec![rule; d],
            Bandwidth::Fixed(h) => vec![h; d],
            Bandwidth::CrossValidated => {
                let unit: Vec<f64> = sds.iter().map(|&s| if s > 0.0 { s } else { 0.0 }).collect();
                let mut z = Rows::empty(d);
                for row in features.iter() {
                    z.push(&scale_row(row, &means, &unit));
                }
                cross_validated_bandwidth(&z, targets, rule)
            }
        };
        let scales: Vec<f64> = sds.iter().zip(&h).map(|(&sd, &h)| if sd > 0.0 { sd * h } else { 0.0 }).collect();
        let mut scaled = Rows::empty(d);
        for row in features.iter() {
            scaled.push(&scale_row(row, &means, &scales));
        }
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| targets[a as usize].total_cmp(&targets[b as usize]));
        Ok(Self {
            means,
            scales,
            bandwidth: h,
            scaled,
            targets: targets.to_vec(),
            order,
            min_neighbors: config.min_neighbors,
            support,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    #[cfg(test)]
    pub(crate) fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn support(&self) -> TargetSupport {
        self.support
    }

    /// Bandwidth per feature in standardized units.
    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub(crate) fn scale_query(&self, features: &[f64]) -> Vec<f64> {
        scale_row(features, &self.means, &self.scales)
    }

    /// Unnormalized kernel weights for one query in kernel units.
    pub(crate) fn weights(&self, q: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut w = vec![0.0; n];
        let mut count = 0usize;
        for (j, wj) in w.iter_mut().enumerate() {
            let u = self.scaled.row(j);
            let mut d2 = 0.0;
            let mut inside = true;
            for (a, b) in u.iter().zip(q) {
                let diff = a - b;
                if diff.abs() > KERNEL_SUPPORT {
                    inside = false;
                    break;
                }
                d2 += diff * diff;
            }
            if inside {
                *wj = (-0.5 * d2).exp();
                count += 1;
            }
        }
        if count < self.min_neighbors {
            return self.nearest_weights(q);
        }
        w
    }

    /// Untruncated Gaussian weights on the `min_neighbors` nearest points,
    /// relative to the nearest so that distant queries do not underflow.
    fn nearest_weights(&self, q: &[f64]) -> Vec<f64> {
        let n = self.n();
        let d2: Vec<f64> = (0..n)
            .map(|j| {
                self.scaled
                    .row(j)
                    .iter()
                    .zip(q)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        let k = self.min_neighbors.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.select_nth_unstable_by(k - 1, |&a, &b| d2[a].total_cmp(&d2[b]).then(a.cmp(&b)));
        let nearest = &idx[..k];
        let d2_min = nearest.iter().map(|&j| d2[j]).fold(f64::INFINITY, f64::min);
        let mut w = vec![0.0; n];
        for &j in nearest {
            w[j] = (-0.5 * (d2[j] - d2_min)).exp();
        }
        w
    }

    pub(crate) fn cdf(&self, features: &[f64], y: f64) -> f64 {
        let w = self.weights(&self.scale_query(features));
        let total: f64 = w.iter().sum();
        let below: f64 = w
            .iter()
            .zip(&self.targets)
            .filter(|(_, &t)| t <= y)
            .map(|(wj, _)| wj)
            .sum();
        (below / total).clamp(0.0, 1.0)
    }

    pub(crate) fn slice(&self, features: &[f64], y_grid: &[f64]) -> Vec<f64> {
        let w = self.weights(&self.scale_query(features));
        self.weighted_ecdf(|j| w[j], y_grid)
    }

    /// Weighted ECDF of the targets on an ascending grid, with weights given
    /// per training index.
    pub(crate) fn weighted_ecdf(&self, weight: impl Fn(usize) -> f64, y_grid: &[f64]) -> Vec<f64> {
        let total: f64 = (0..self.n()).map(&weight).sum();
        let mut out = Vec::with_capacity(y_grid.len());
        let mut cum = 0.0;
        let mut p = 0;
        for &y in y_grid {
            while p < self.order.len() && self.targets[self.order[p] as usize] <= y {
                cum += weight(self.order[p] as usize);
                p += 1;
            }
            out.push((cum / total).clamp(0.0, 1.0));
        }
        out
    }

    pub(crate) fn first_target_above(&self, y: f64) -> Option<f64> {
        let p = self
            .order
            .partition_point(|&j| self.targets[j as usize] <= y);
        self.order.get(p).map(|&j| self.targets[j as usize])
    }

    /// Averaged kernel weights `A_j = (1/R) sum_r w_j(lead_g, rest_r) / S_r`
    /// for every lead value. Exploits the product structure: the rest-part
    /// kernel matrix is built once and the lead part is a per-`g` factor.
    pub(crate) fn averaged_weights(
        &self,
        lead: &[f64],
        rest: &Rows,
        exec: Execution,
    ) -> Vec<Vec<f64>> {
        let n = self.n();
        let r_count = rest.len();
        // Training points in ascending lead-coordinate order.
        let mut by_lead: Vec<u32> = (0..n as u32).collect();
        by_lead.sort_by(|&a, &b| {
            self.scaled.row(a as usize)[0].total_cmp(&self.scaled.row(b as usize)[0])
        });
        let lead_sorted: Vec<f64> = by_lead
            .iter()
            .map(|&j| self.scaled.row(j as usize)[0])
            .collect();
        let rest_q: Vec<Vec<f64>> = rest
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&self.means[1..])
                    .zip(&self.scales[1..])
                    .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
                    .collect()
            })
            .collect();
        // Sparse rest-kernel rows: (position in by_lead, weight), sorted by position.
        let sparse: Vec<Vec<(u32, f64)>> = exec.map(r_count, |r| {
            let q = &rest_q[r];
            let mut row = Vec::new();
            for (p, &j) in by_lead.iter().enumerate() {
                let u = &self.scaled.row(j as usize)[1..];
                let mut d2 = 0.0;
                let mut inside = true;
                for (a, b) in u.iter().zip(q) {
                    let diff = a - b;
                    if diff.abs() > KERNEL_SUPPORT {
                        inside = false;
                        break;
                    }
                    d2 += diff * diff;
                }
                if inside {
                    row.push((p as u32, (-0.5 * d2).exp()));
                }
            }
            row
        });

        let lead_scale = self.scales[0];
        exec.map(lead.len(), |g| {
            let ug = if lead_scale > 0.0 {
                (lead[g] - self.means[0]) / lead_scale
            } else {
                0.0
            };
            let plo = lead_sorted.partition_point(|&u| u < ug - KERNEL_SUPPORT);
            let phi = lead_sorted.partition_point(|&u| u <= ug + KERNEL_SUPPORT);
            let a: Vec<f64> = lead_sorted[plo..phi]
                .iter()
                .map(|&u| (-0.5 * (u - ug) * (u - ug)).exp())
                .collect();
            let mut acc = vec![0.0; n];
            for (r, row) in sparse.iter().enumerate() {
                let s0 = row.partition_point(|e| (e.0 as usize) < plo);
                let s1 = row.partition_point(|e| (e.0 as usize) < phi);
                let active = &row[s0..s1];
                if active.len() < self.min_neighbors {
                    let mut q = Vec::with_capacity(self.dim());
                    q.push(ug);
                    q.extend_from_slice(&rest_q[r]);
                    let w = self.weights(&q);
                    let total: f64 = w.iter().sum();
                    for (p, &j) in by_lead.iter().enumerate() {
                        acc[p] += w[j as usize] / total;
                    }
                    continue;
                }
                let s: f64 = active
                    .iter()
                    .map(|&(p, k)| a[p as usize - plo] * k)
                    .sum();
                let inv = 1.0 / s;
                for &(p, k) in active {
                    acc[p as usize] += a[p as usize - plo] * k * inv;
                }
            }
            // Back to training-index order.
            let mut out = vec![0.0; n];
            for (p, &j) in by_lead.iter().enumerate() {
                out[j as usize] = acc[p] / r_count as f64;
            }
            out
        })
    }

    pub(crate) fn averaged_rows(
        &self,
        lead: &[f64],
        rest: &Rows,
        y_grid: &[f64],
        exec: Execution,
    ) -> Vec<Vec<f64>> {
        let weights = self.averaged_weights(lead, rest, exec);
        exec.map(lead.len(), |g| self.weighted_ecdf(|j| weights[g][j], y_grid))
    }
}

/// Multiples of the rule-of-thumb bandwidth tried by cross-validation.
pub const CV_MULTIPLIERS: [f64; 7] = [0.2, 0.3, 0.45, 0.65, 1.0, 1.5, 2.2];
/// Held-out queries scored per candidate bandwidth.
const CV_QUERIES: usize = 400;

/// Leave-one-out choice of per-feature bandwidths from
/// [`CV_MULTIPLIERS`]` * rule`. A shared multiplier is chosen first, then
/// each coordinate is refined in turn for two sweeps. The criterion is the
/// Brier score of the kernel CDF at the nine target deciles, summed over an
/// evenly strided subset of training rows. `z` holds standardized features.
fn cross_validated_bandwidth(z: &Rows, targets: &[f64], rule: f64) -> Vec<f64> {
    let d = z.dim();
    let cv = LooBrier::new(z, targets);
    let mut best = (f64::INFINITY, vec![rule; d]);
    for m in CV_MULTIPLIERS {
        let h = vec![rule * m; d];
        let score = cv.score(&h);
        if score < best.0 {
            best = (score, h);
        }
    }
    if d > 1 {
        for _ in 0..2 {
            for k in 0..d {
                for m in CV_MULTIPLIERS {
                    let mut h = best.1.clone();
                    h[k] = rule * m;
                    if h[k] == best.1[k] {
                        continue;
                    }
                    let score = cv.score(&h);
                    if score < best.0 {
                        best = (score, h);
                    }
                }
            }
        }
    }
    best.1
}

struct LooBrier<'a> {
    z: &'a Rows,
    targets: &'a [f64],
    thresholds: Vec<f64>,
    marginal: Vec<f64>,
    queries: Vec<usize>,
}

impl<'a> LooBrier<'a> {
    fn new(z: &'a Rows, targets: &'a [f64]) -> Self {
        let n = targets.len();
        let sorted = crate::stats::sorted_copy(targets);
        let thresholds: Vec<f64> =
            (1..10).map(|t| crate::stats::quantile_type7(&sorted, t as f64 / 10.0)).collect();
        let marginal = thresholds
            .iter()
            .map(|&t| sorted.partition_point(|&y| y <= t) as f64 / n as f64)
            .collect();
        let stride = n.div_ceil(CV_QUERIES).max(1);
        Self { z, targets, thresholds, marginal, queries: (0..n).step_by(stride).collect() }
    }

    fn score(&self, h: &[f64]) -> f64 {
        let n = self.targets.len();
        let mut score = 0.0;
        let mut below = vec![0.0; self.thresholds.len()];
        for &i in &self.queries {
            let q = self.z.row(i);
            below.iter_mut().for_each(|b| *b = 0.0);
            let mut total = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let mut d2 = 0.0;
                let mut inside = true;
                for ((a, b), h) in self.z.row(j).iter().zip(q).zip(h) {
                    let diff = (a - b) / h;
                    if diff.abs() > KERNEL_SUPPORT {
                        inside = false;
                        break;
                    }
                    d2 += diff * diff;
                }
                if inside {
                    let w = (-0.5 * d2).exp();
                    total += w;
                    for (b, &t) in below.iter_mut().zip(&self.thresholds) {
                        if self.targets[j] <= t {
                            *b += w;
                        }
                    }
                }
            }
            for (t, &thr) in self.thresholds.iter().enumerate() {
                let f = if total > 0.0 { below[t] / total } else { self.marginal[t] };
                let hit = f64::from(u8::from(self.targets[i] <= thr));
                score += (f - hit) * (f - hit);
            }
        }
        score
    }
}

fn scale_row(row: &[f64], means: &[f64], scales: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(means)
        .zip(scales)
        .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
        .collect()
}
