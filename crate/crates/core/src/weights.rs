//! Dynamic density weighting of the regression loss.
//!
//! Each sample's weight is a monotone proxy for the local density of the
//! batch: `w_i = exp(-(gamma / sigma) * dbar_k(x_i))`, where `dbar_k` is the
//! mean distance to the k nearest neighbors within the batch and `sigma` is
//! the batch median of `dbar_k`. Weights are normalized to mean one so the
//! loss scale stays comparable across gamma.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{median, pairwise_distances, Matrix};

/// Parameters of the dynamic density weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightSpec {
    /// Density exponent, `gamma >= 0`. Zero disables weighting.
    pub gamma: f64,
    /// Neighbor count for the mean k-NN distance; must be below the batch size.
    pub k: usize,
    /// Guard for degenerate batches: if the median of `dbar` falls below this
    /// floor, weights fall back to uniform and the batch is flagged.
    pub sigma_floor: f64,
}

impl WeightSpec {
    pub fn new(gamma: f64, k: usize) -> Self {
        WeightSpec {
            gamma,
            k,
            sigma_floor: 1e-12,
        }
    }
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::new(1.0, 16)
    }
}

/// Per-batch view of the weighting computation.
#[derive(Debug, Clone)]
pub struct WeightedBatchView {
    /// Mean k-NN distance per sample.
    pub dbar: Vec<f64>,
    /// Scale actually used: batch median of `dbar` (or the floor).
    pub sigma: f64,
    /// Mean-one weights, strictly positive.
    pub weights: Vec<f64>,
    /// True when the batch was degenerate and uniform weights were used.
    pub degenerate: bool,
}

/// Mean distance to the k nearest neighbors for every row of `points`.
///
/// A point is never its own neighbor; ties are broken toward the smaller
/// row index.
pub fn knn_mean_distances(points: &Matrix, k: usize) -> Result<Vec<f64>> {
    let n = points.rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArg(format!(
            "neighbor count k = {k} must satisfy 1 <= k <= N-1 with N = {n}"
        )));
    }
    let dist = pairwise_distances(points)?;
    let mut dbar = Vec::with_capacity(n);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        let row = dist.row(i);
        for (j, &d) in row.iter().enumerate() {
            if j != i {
                scratch.push((d, j));
            }
        }
        scratch.select_nth_unstable_by(k - 1, |a, b| {
            a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
        });
        // Sum the selected neighbors in sorted order so dbar is invariant to
        // the layout of the batch, bit for bit.
        scratch[..k].sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let sum: f64 = scratch[..k].iter().map(|&(d, _)| d).sum();
        dbar.push(sum / k as f64);
    }
    Ok(dbar)
}

/// Exponential density weights from precomputed `dbar` values.
///
/// `sigma` is the batch median of `dbar`; raw weights `exp(-(gamma/sigma) *
/// dbar_i)` are divided by their batch mean. With `gamma = 0`, or for a
/// degenerate batch (median below the floor), all weights are exactly one.
pub fn compute_weights(dbar: &[f64], spec: &WeightSpec) -> Result<WeightedBatchView> {
    if dbar.is_empty() {
        return Err(Error::EmptyInput("compute_weights"));
    }
    if dbar.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::InvalidArg(
            "dbar must be nonnegative and finite".to_string(),
        ));
    }
    let n = dbar.len();
    let sigma = median(dbar)?;
    if spec.gamma == 0.0 {
        return Ok(WeightedBatchView {
            dbar: dbar.to_vec(),
            sigma,
            weights: vec![1.0; n],
            degenerate: false,
        });
    }
    if sigma < spec.sigma_floor {
        return Ok(WeightedBatchView {
            dbar: dbar.to_vec(),
            sigma: spec.sigma_floor,
            weights: vec![1.0; n],
            degenerate: true,
        });
    }
    let rate = spec.gamma / sigma;
    let raw: Vec<f64> = dbar.iter().map(|d| (-rate * d).exp()).collect();
    if raw.iter().all(|&r| r == raw[0]) {
        // Equal dbar gives exactly uniform weights; skip the normalizer so no
        // round-off leaks in.
        return Ok(WeightedBatchView {
            dbar: dbar.to_vec(),
            sigma,
            weights: vec![1.0; n],
            degenerate: false,
        });
    }
    // Sum in sorted order: the normalizer, and hence every weight, is then
    // invariant under batch permutations.
    let mut sorted = raw.clone();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    let mean = sorted.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 || !mean.is_finite() {
        // All weights underflowed to zero: treat as degenerate.
        return Ok(WeightedBatchView {
            dbar: dbar.to_vec(),
            sigma,
            weights: vec![1.0; n],
            degenerate: true,
        });
    }
    let weights: Vec<f64> = raw.iter().map(|w| w / mean).collect();
    Ok(WeightedBatchView {
        dbar: dbar.to_vec(),
        sigma,
        weights,
        degenerate: false,
    })
}

/// Convenience: k-NN distances plus weights in one call.
pub fn weigh_batch(points: &Matrix, spec: &WeightSpec) -> Result<WeightedBatchView> {
    let dbar = knn_mean_distances(points, spec.k)?;
    compute_weights(&dbar, spec)
}

/// Effective sample size of a mean-one weight vector, in (0, 1].
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum_sq == 0.0 {
        return 0.0;
    }
    (sum * sum) / (sum_sq * weights.len() as f64)
}
