use serde::{Deserialize, Serialize};

use super::kernel::KernelEmpirical;
use super::{BackboneConfig, TargetSupport, GRID_MARGIN};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rows::Rows;
use crate::stats::{quantile_type7, sorted_copy};

/// Binned predictive distribution: equal-mass target bins whose
/// probabilities are kernel-weighted training masses, shrunk toward the
/// uniform bin distribution with weight `bins / n`. The density is uniform
/// within each bin; the outer bins extend by the grid margin past the
/// observed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedHistogram {
    weights: KernelEmpirical,
    /// Ascending bin edges, `bins + 1` of them after merging ties.
    edges: Vec<f64>,
    /// Bin index of each training target.
    bin_of: Vec<u32>,
    smoothing: f64,
}

impl BinnedHistogram {
    pub(crate) fn fit(features: &Rows, targets: &[f64], config: &BackboneConfig) -> Result<Self> {
        let support = TargetSupport::of(targets);
        if support.range() <= 0.0 {
            return Err(Error::Degenerate("all training targets are identical".into()));
        }
        let weights = KernelEmpirical::fit(features, targets, config)?;
        let sorted = sorted_copy(targets);
        let margin = GRID_MARGIN * support.range();
        let mut edges = vec![support.min - margin];
        for b in 1..config.bins {
            let e = quantile_type7(&sorted, b as f64 / config.bins as f64);
            if e > *edges.last().unwrap() && e < support.max {
                edges.push(e);
            }
        }
        edges.push(support.max + margin);
        let bin_of = targets
            .iter()
            .map(|&t| bin_index(&edges, t) as u32)
            .collect();
        let bins = edges.len() - 1;
        Ok(Self {
            weights,
            edges,
            bin_of,
            smoothing: bins as f64 / targets.len() as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn support(&self) -> TargetSupport {
        self.weights.support()
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    fn bin_probabilities(&self, weight: impl Fn(usize) -> f64) -> Vec<f64> {
        let bins = self.bins();
        let mut mass = vec![0.0; bins];
        let mut total = 0.0;
        for (j, &b) in self.bin_of.iter().enumerate() {
            let w = weight(j);
            mass[b as usize] += w;
            total += w;
        }
        let prior = self.smoothing / bins as f64;
        mass.iter()
            .map(|m| (m / total + prior) / (1.0 + self.smoothing))
            .collect()
    }

    fn cdf_from_probs(&self, probs: &[f64], y: f64) -> f64 {
        let first = self.edges[0];
        let last = *self.edges.last().unwrap();
        if y <= first {
            return 0.0;
        }
        if y >= last {
            return 1.0;
        }
        let b = bin_index(&self.edges, y);
        let below: f64 = probs[..b].iter().sum();
        let (lo, hi) = (self.edges[b], self.edges[b + 1]);
        (below + probs[b] * (y - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    fn grid_from_probs(&self, probs: &[f64], y_grid: &[f64]) -> Vec<f64> {
        let mut cum = vec![0.0; probs.len() + 1];
        for (b, p) in probs.iter().enumerate() {
            cum[b + 1] = cum[b] + p;
        }
        let first = self.edges[0];
        let last = *self.edges.last().unwrap();
        y_grid
            .iter()
            .map(|&y| {
                if y <= first {
                    0.0
                } else if y >= last {
                    1.0
                } else {
                    let b = bin_index(&self.edges, y);
                    let (lo, hi) = (self.edges[b], self.edges[b + 1]);
                    (cum[b] + probs[b] * (y - lo) / (hi - lo)).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    pub(crate) fn cdf(&self, features: &[f64], y: f64) -> f64 {
        let w = self.weights.weights(&self.weights.scale_query(features));
        self.cdf_from_probs(&self.bin_probabilities(|j| w[j]), y)
    }

    pub(crate) fn slice(&self, features: &[f64], y_grid: &[f64]) -> Vec<f64> {
        let w = self.weights.weights(&self.weights.scale_query(features));
        self.grid_from_probs(&self.bin_probabilities(|j| w[j]), y_grid)
    }

    pub(crate) fn averaged_rows(
        &self,
        lead: &[f64],
        rest: &Rows,
        y_grid: &[f64],
        exec: Execution,
    ) -> Vec<Vec<f64>> {
        // Bin probabilities are affine in normalized weights, so averaging the
        // weights first gives the average of the per-query CDFs.
        let avg = self.weights.averaged_weights(lead, rest, exec);
        exec.map(lead.len(), |g| {
            let probs = self.bin_probabilities(|j| avg[g][j]);
            self.grid_from_probs(&probs, y_grid)
        })
    }

    #[cfg(test)]
    pub(crate) fn training_targets(&self) -> &[f64] {
        self.weights.targets()
    }
}

/// Index `b` with `edges[b] <= y < edges[b + 1]`, clamped to the bin range.
fn bin_index(edges: &[f64], y: f64) -> usize {
    let p = edges.partition_point(|&e| e <= y);
    p.saturating_sub(1).min(edges.len() - 2)
}
