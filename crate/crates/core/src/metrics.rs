//! Evaluation metrics: kernel two-sample distance, field smoothness, velocity
//! norm maps, and the geometric selection criterion for picking gamma.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{jacobian_fd, VelocityField};
use crate::numerics::{median, Matrix, SeededRng};

/// Kernel bandwidth rule for the RBF MMD.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample, recomputed per call.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MmdSpec {
    pub bandwidth: Bandwidth,
}

impl Default for MmdSpec {
    fn default() -> Self {
        MmdSpec {
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased U-statistic MMD^2; may be slightly negative.
    pub value: f64,
    /// Bandwidth actually used.
    pub bandwidth: f64,
}

/// Unbiased RBF-MMD^2 between the rows of `x` and `y` with kernel
/// `k(a,b) = exp(-||a-b||^2 / (2 sigma^2))`; diagonal terms excluded.
pub fn rbf_mmd2(x: &Matrix, y: &Matrix, spec: &MmdSpec) -> Result<f64> {
    Ok(rbf_mmd2_detailed(x, y, spec)?.value)
}

pub fn rbf_mmd2_detailed(x: &Matrix, y: &Matrix, spec: &MmdSpec) -> Result<MmdEstimate> {
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(Error::InvalidArg(format!(
            "rbf_mmd2 needs at least 2 points per sample, got {n} and {m}"
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::DimMismatch {
            what: "rbf_mmd2",
            expected: x.cols(),
            got: y.cols(),
        });
    }
    let d = x.cols();

    let sq = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for j in 0..d {
            let r = a[j] - b[j];
            s += r * r;
        }
        s
    };

    let sigma = match spec.bandwidth {
        Bandwidth::Fixed(s) => {
            if s <= 0.0 {
                return Err(Error::InvalidArg("bandwidth must be positive".to_string()));
            }
            s
        }
        Bandwidth::MedianHeuristic => {
            // Median pairwise distance over the pooled sample.
            let total = n + m;
            let row = |i: usize| -> &[f64] {
                if i < n {
                    x.row(i)
                } else {
                    y.row(i - n)
                }
            };
            let mut dists = Vec::with_capacity(total * (total - 1) / 2);
            for i in 0..total {
                for j in (i + 1)..total {
                    dists.push(sq(row(i), row(j)).sqrt());
                }
            }
            median(&dists)?.max(1e-12)
        }
    };
    let gain = -0.5 / (sigma * sigma);

    let mut kxx = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            kxx += (gain * sq(x.row(i), x.row(j))).exp();
        }
    }
    let mut kyy = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            kyy += (gain * sq(y.row(i), y.row(j))).exp();
        }
    }
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += (gain * sq(x.row(i), y.row(j))).exp();
        }
    }

    let value = 2.0 * kxx / (n as f64 * (n - 1) as f64) + 2.0 * kyy / (m as f64 * (m - 1) as f64)
        - 2.0 * kxy / (n as f64 * m as f64);
    Ok(MmdEstimate {
        value,
        bandwidth: sigma,
    })
}

/// Default time grid for the smoothness average.
pub const SMOOTHNESS_T_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Ambient smoothness proxy: mean of `||dv/dx||_F^2` over standard-normal
/// probe points and the given times. The FD step follows the probe scale,
/// `h = 1e-5 (1 + ||x||)`.
pub fn smoothness(
    field: &dyn VelocityField,
    n_probe: usize,
    t_grid: &[f64],
    rng: &mut SeededRng,
) -> Result<f64> {
    if n_probe == 0 || t_grid.is_empty() {
        return Err(Error::InvalidArg(
            "smoothness needs probes and a time grid".to_string(),
        ));
    }
    let d = field.dim();
    let mut total = 0.0;
    let mut x = vec![0.0; d];
    for _ in 0..n_probe {
        rng.fill_normal(&mut x);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = 1e-5 * (1.0 + norm);
        for &t in t_grid {
            let jac = jacobian_fd(field, &x, t, h);
            total += jac.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(total / (n_probe * t_grid.len()) as f64)
}

/// Velocity norms on a 2-D slice of the ambient space: coordinates
/// `slice_dims` sweep the grid, all other coordinates are zero. Entry
/// `(i, j)` is the norm at `(xs[i], ys[j])`.
pub fn velocity_norm_map(
    field: &dyn VelocityField,
    xs: &[f64],
    ys: &[f64],
    t: f64,
    slice_dims: (usize, usize),
) -> Result<Matrix> {
    let d = field.dim();
    let (sx, sy) = slice_dims;
    if sx >= d || sy >= d || sx == sy {
        return Err(Error::InvalidArg(format!(
            "slice dims ({sx}, {sy}) invalid for dimension {d}"
        )));
    }
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::InvalidArg("grid must be at least 2x2".to_string()));
    }
    let mut points = Matrix::zeros(xs.len() * ys.len(), d);
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            let row = points.row_mut(i * ys.len() + j);
            row[sx] = x;
            row[sy] = y;
        }
    }
    let mut v = Matrix::zeros(points.rows(), d);
    field.eval_batch(&points, t, &mut v);
    let mut map = Matrix::zeros(xs.len(), ys.len());
    for i in 0..xs.len() {
        for j in 0..ys.len() {
            let row = v.row(i * ys.len() + j);
            map.set(i, j, row.iter().map(|u| u * u).sum::<f64>().sqrt());
        }
    }
    Ok(map)
}

/// Geometric selection criterion over a gamma grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GscReport {
    pub gamma_grid: Vec<f64>,
    pub mmd: Vec<f64>,
    pub smoothness: Vec<f64>,
    pub normalized_bias: Vec<f64>,
    pub normalized_penalty: Vec<f64>,
    pub gsc: Vec<f64>,
    pub argmin_gamma: f64,
    pub lambda: f64,
    /// Names of terms whose range over the grid was zero (they contribute a
    /// constant 0 to the criterion).
    pub degenerate_terms: Vec<String>,
}

/// Min-max normalizes both terms over the grid, sums them with weight
/// `lambda` on the penalty, and reports the argmin (ties go to smaller
/// gamma).
pub fn gsc(
    gamma_grid: &[f64],
    mmd: &[f64],
    smoothness: &[f64],
    lambda: f64,
) -> Result<GscReport> {
    let n = gamma_grid.len();
    if n < 2 {
        return Err(Error::InvalidArg(
            "gsc needs a gamma grid of length >= 2".to_string(),
        ));
    }
    if mmd.len() != n || smoothness.len() != n {
        return Err(Error::DimMismatch {
            what: "gsc arrays",
            expected: n,
            got: mmd.len().min(smoothness.len()),
        });
    }
    let mut degenerate = Vec::new();
    let normalized_bias = min_max_normalize(mmd).unwrap_or_else(|| {
        degenerate.push("mmd".to_string());
        vec![0.0; n]
    });
    let normalized_penalty = min_max_normalize(smoothness).unwrap_or_else(|| {
        degenerate.push("smoothness".to_string());
        vec![0.0; n]
    });
    let gsc_values: Vec<f64> = normalized_bias
        .iter()
        .zip(normalized_penalty.iter())
        .map(|(b, p)| b + lambda * p)
        .collect();
    let mut argmin = 0usize;
    for i in 1..n {
        if gsc_values[i] < gsc_values[argmin] {
            argmin = i;
        }
    }
    Ok(GscReport {
        gamma_grid: gamma_grid.to_vec(),
        mmd: mmd.to_vec(),
        smoothness: smoothness.to_vec(),
        normalized_bias,
        normalized_penalty,
        gsc: gsc_values,
        argmin_gamma: gamma_grid[argmin],
        lambda,
        degenerate_terms: degenerate,
    })
}

fn min_max_normalize(values: &[f64]) -> Option<Vec<f64>> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range == 0.0 {
        return None;
    }
    Some(values.iter().map(|v| (v - min) / range).collect())
}

/// Adam hyperparameters echoed into every run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Raw (unnormalized) GSC terms of a single model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GscTerms {
    pub bias: f64,
    pub penalty: f64,
}

/// Metrics bundle of one evaluated model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub gamma: f64,
    pub inlier_mmd: f64,
    pub outlier_mmd: f64,
    pub smoothness: f64,
    pub nfe: usize,
    pub wall_clock_s: f64,
    pub mmd_bandwidth: f64,
    pub gsc_terms: GscTerms,
    pub optimizer: OptimizerInfo,
}
