//! Seeded synthetic data generators.
//!
//! Four families cover the experiments: a 2-D ring embedded in 20 dimensions,
//! 1-D double-well samples, a Gaussian-mixture latent proxy, and its
//! contaminated variant with broad-Gaussian outliers. Every generator is a
//! pure function of its spec and seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Which generator to run, with its kind-specific parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Ring20d {
        n: usize,
        seed: u64,
        radius: f64,
        noise_manifold: f64,
        noise_ambient: f64,
        ambient_dims: usize,
    },
    DoubleWell1d {
        n: usize,
        seed: u64,
    },
    GmmLatent {
        n: usize,
        seed: u64,
        dim: usize,
        n_modes: usize,
        spread: f64,
    },
    Contaminated {
        n: usize,
        seed: u64,
        dim: usize,
        n_modes: usize,
        spread: f64,
        eps: f64,
        outlier_scale: f64,
    },
}

impl DatasetSpec {
    pub fn ring20d_default(n: usize, seed: u64) -> Self {
        DatasetSpec::Ring20d {
            n,
            seed,
            radius: 1.0,
            noise_manifold: 0.05,
            noise_ambient: 0.05,
            ambient_dims: 18,
        }
    }

    /// Latent proxy defaults: ten modes in 16 dimensions on a radius-5 sphere.
    pub fn gmm_default(n: usize, seed: u64) -> Self {
        DatasetSpec::GmmLatent {
            n,
            seed,
            dim: 16,
            n_modes: 10,
            spread: 5.0,
        }
    }

    /// Contamination defaults: five percent outliers at four times the unit
    /// component scale, close enough to distract the fit.
    pub fn contaminated_default(n: usize, seed: u64) -> Self {
        DatasetSpec::Contaminated {
            n,
            seed,
            dim: 16,
            n_modes: 10,
            spread: 5.0,
            eps: 0.05,
            outlier_scale: 4.0,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            DatasetSpec::Ring20d { n, .. }
            | DatasetSpec::DoubleWell1d { n, .. }
            | DatasetSpec::GmmLatent { n, .. }
            | DatasetSpec::Contaminated { n, .. } => *n,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DatasetSpec::Ring20d { seed, .. }
            | DatasetSpec::DoubleWell1d { seed, .. }
            | DatasetSpec::GmmLatent { seed, .. }
            | DatasetSpec::Contaminated { seed, .. } => *seed,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Ring20d { ambient_dims, .. } => 2 + ambient_dims,
            DatasetSpec::DoubleWell1d { .. } => 1,
            DatasetSpec::GmmLatent { dim, .. } | DatasetSpec::Contaminated { dim, .. } => *dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DatasetSpec::Ring20d { .. } => "ring20d",
            DatasetSpec::DoubleWell1d { .. } => "double_well_1d",
            DatasetSpec::GmmLatent { .. } => "gmm_latent",
            DatasetSpec::Contaminated { .. } => "contaminated",
        }
    }
}

/// Generated samples plus the inlier mask (all true except for the
/// contaminated family).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Matrix,
    pub inlier_mask: Vec<bool>,
}

/// Runs the generator for `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n() == 0 {
        return Err(Error::EmptyInput("dataset generation"));
    }
    let mut rng = SeededRng::new(spec.seed());
    match spec {
        DatasetSpec::Ring20d {
            n,
            radius,
            noise_manifold,
            noise_ambient,
            ambient_dims,
            ..
        } => {
            let samples = ring20d(*n, *radius, *noise_manifold, *noise_ambient, *ambient_dims, &mut rng);
            Ok(Dataset {
                inlier_mask: vec![true; samples.rows()],
                samples,
            })
        }
        DatasetSpec::DoubleWell1d { n, .. } => {
            let values = double_well_samples(*n, &mut rng);
            let samples = Matrix::from_vec(*n, 1, values)?;
            Ok(Dataset {
                inlier_mask: vec![true; *n],
                samples,
            })
        }
        DatasetSpec::GmmLatent {
            n,
            seed,
            dim,
            n_modes,
            spread,
        } => {
            let samples = gmm_latent(*n, *dim, *n_modes, *spread, *seed, &mut rng)?;
            Ok(Dataset {
                inlier_mask: vec![true; *n],
                samples,
            })
        }
        DatasetSpec::Contaminated {
            n,
            seed,
            dim,
            n_modes,
            spread,
            eps,
            outlier_scale,
        } => {
            let (samples, inlier_mask) = contaminated_latents(
                *n,
                *dim,
                *n_modes,
                *spread,
                *eps,
                *outlier_scale,
                *seed,
                &mut rng,
            )?;
            Ok(Dataset {
                samples,
                inlier_mask,
            })
        }
    }
}

/// Noisy circle in the first two coordinates, low-magnitude Gaussian noise in
/// the remaining `ambient_dims`.
pub fn ring20d(
    n: usize,
    radius: f64,
    noise_manifold: f64,
    noise_ambient: f64,
    ambient_dims: usize,
    rng: &mut SeededRng,
) -> Matrix {
    let d = 2 + ambient_dims;
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let theta = 2.0 * std::f64::consts::PI * rng.uniform();
        let row = out.row_mut(i);
        row[0] = radius * theta.cos() + noise_manifold * rng.normal();
        row[1] = radius * theta.sin() + noise_manifold * rng.normal();
        for v in row[2..].iter_mut() {
            *v = noise_ambient * rng.normal();
        }
    }
    out
}

/// Double-well potential `V(x) = x^4/4 - 3 x^2/4`; its minima sit at
/// x = +-sqrt(3/2) with V = -9/16.
pub fn double_well_potential(x: f64) -> f64 {
    0.25 * x.powi(4) - 0.75 * x * x
}

pub fn double_well_potential_grad(x: f64) -> f64 {
    x.powi(3) - 1.5 * x
}

const DOUBLE_WELL_MIN_V: f64 = -9.0 / 16.0;

/// Rejection sampler for `p(x) ~ exp(-V(x))` with a uniform proposal on
/// [-3, 3] and envelope `exp(-min V)`.
pub fn double_well_samples(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = -3.0 + 6.0 * rng.uniform();
        let accept = ((-double_well_potential(x)) - (-DOUBLE_WELL_MIN_V)).exp();
        if rng.uniform() < accept {
            out.push(x);
        }
    }
    out
}

/// Mixture centers on a sphere of radius `spread`. The centers depend only on
/// `mixture_seed`, so train and evaluation splits drawn with different sample
/// streams share one mixture.
pub fn gmm_centers(dim: usize, n_modes: usize, spread: f64, mixture_seed: u64) -> Matrix {
    let mut rng = SeededRng::new(mixture_seed).derive(0xC3A7);
    let mut centers = Matrix::zeros(n_modes, dim);
    for m in 0..n_modes {
        let row = centers.row_mut(m);
        let mut norm2 = 0.0;
        for v in row.iter_mut() {
            *v = rng.normal();
            norm2 += *v * *v;
        }
        let scale = spread / norm2.sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    centers
}

/// Equal-weight Gaussian mixture with unit component covariance.
pub fn gmm_latent(
    n: usize,
    dim: usize,
    n_modes: usize,
    spread: f64,
    mixture_seed: u64,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    if n_modes == 0 {
        return Err(Error::InvalidArg("n_modes must be >= 1".to_string()));
    }
    let centers = gmm_centers(dim, n_modes, spread, mixture_seed);
    let mut out = Matrix::zeros(n, dim);
    for i in 0..n {
        let mode = rng.index(n_modes);
        let c = centers.row(mode).to_vec();
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = c[j] + rng.normal();
        }
    }
    Ok(out)
}

/// Mixture inliers plus `eps * n` outliers from a broad zero-mean Gaussian.
/// The mask is true exactly on the inliers.
#[allow(clippy::too_many_arguments)]
pub fn contaminated_latents(
    n: usize,
    dim: usize,
    n_modes: usize,
    spread: f64,
    eps: f64,
    outlier_scale: f64,
    mixture_seed: u64,
    rng: &mut SeededRng,
) -> Result<(Matrix, Vec<bool>)> {
    if !(0.0..=0.5).contains(&eps) {
        return Err(Error::InvalidArg(format!(
            "contamination fraction eps = {eps} must lie in [0, 0.5]"
        )));
    }
    let n_out = (eps * n as f64).round() as usize;
    let n_in = n - n_out;
    let inliers = gmm_latent(n_in, dim, n_modes, spread, mixture_seed, rng)?;
    let mut samples = Matrix::zeros(n, dim);
    let mut mask = vec![false; n];
    for i in 0..n_in {
        samples.row_mut(i).copy_from_slice(inliers.row(i));
        mask[i] = true;
    }
    for i in n_in..n {
        for v in samples.row_mut(i).iter_mut() {
            *v = outlier_scale * rng.normal();
        }
    }
    Ok((samples, mask))
}
