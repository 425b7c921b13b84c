//! Training loop: independent noise-data coupling, linear interpolants,
//! dynamic density weights, Adam updates.
//!
//! One iteration draws a data batch with replacement, a standard-normal noise
//! batch, and uniform times; forms `xt = (1-t) x0 + t x1` and `ut = x1 - x0`;
//! weighs the batch when `gamma > 0` (otherwise the weighting branch is
//! skipped entirely, so the gamma = 0 path is identical to unweighted flow
//! matching); then takes one optimizer step on the weighted loss.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    loss_and_gradient, optimizer_step, save_checkpoint, OptimizerState, VectorFieldModel,
    DEFAULT_HIDDEN,
};
use crate::numerics::{Matrix, SeededRng};
use crate::weights::{effective_sample_size, weigh_batch, WeightSpec};

/// One minibatch of paired noise/data particles with interpolants, targets,
/// and weights: the unit of a single training step.
#[derive(Debug, Clone)]
pub struct ParticleBatch {
    pub x0: Matrix,
    pub x1: Matrix,
    pub t: Vec<f64>,
    pub xt: Matrix,
    pub ut: Matrix,
    pub weights: Vec<f64>,
}

/// Full configuration of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub weight_spec: WeightSpec,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Write a checkpoint every this many iterations (plus the final one)
    /// when a checkpoint directory is set.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub dataset_id: String,
}

impl TrainConfig {
    pub fn new(gamma: f64, k: usize, iterations: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size: 128,
            iterations,
            weight_spec: WeightSpec::new(gamma, k),
            learning_rate: 1e-3,
            seed,
            hidden: DEFAULT_HIDDEN.to_vec(),
            checkpoint_every: 1000,
            checkpoint_dir: None,
            dataset_id: String::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::InvalidArg("batch size must be >= 4".to_string()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArg("iterations must be >= 1".to_string()));
        }
        if self.weight_spec.gamma < 0.0 {
            return Err(Error::InvalidArg("gamma must be >= 0".to_string()));
        }
        if self.weight_spec.k == 0 || self.weight_spec.k >= self.batch_size {
            return Err(Error::InvalidArg(format!(
                "k = {} must satisfy 1 <= k < batch size {}",
                self.weight_spec.k, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Per-iteration training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Effective sample size of the weights, in (0, 1].
    pub ess: f64,
    pub ms_per_iter: f64,
}

pub type TrainLog = Vec<TrainRecord>;

/// Draws the flow matching variables in a fixed order: data indices, noise,
/// times. The coupling is independent (no transport pairing).
pub fn sample_batch(
    dataset: &Matrix,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let n = dataset.rows();
    if n == 0 {
        return Err(Error::EmptyInput("sample_batch dataset"));
    }
    let d = dataset.cols();
    let mut x1 = Matrix::zeros(batch_size, d);
    for i in 0..batch_size {
        let idx = rng.index(n);
        x1.row_mut(i).copy_from_slice(dataset.row(idx));
    }
    let mut x0 = Matrix::zeros(batch_size, d);
    rng.fill_normal(x0.data_mut());
    let t: Vec<f64> = (0..batch_size).map(|_| rng.uniform()).collect();
    Ok((x0, x1, t))
}

/// Linear path: `xt = (1-t) x0 + t x1`, `ut = x1 - x0` (so `dxt/dt = ut`).
pub fn make_interpolants(x0: &Matrix, x1: &Matrix, t: &[f64]) -> (Matrix, Matrix) {
    let (b, d) = (x0.rows(), x0.cols());
    assert_eq!(x1.rows(), b);
    assert_eq!(x1.cols(), d);
    assert_eq!(t.len(), b);
    let mut xt = Matrix::zeros(b, d);
    let mut ut = Matrix::zeros(b, d);
    for i in 0..b {
        let ti = t[i];
        let (r0, r1) = (x0.row(i), x1.row(i));
        let xr = xt.row_mut(i);
        for j in 0..d {
            xr[j] = (1.0 - ti) * r0[j] + ti * r1[j];
        }
        let ur = ut.row_mut(i);
        for j in 0..d {
            ur[j] = r1[j] - r0[j];
        }
    }
    (xt, ut)
}

/// Assembles one weighted batch; the weighting branch is entered only for
/// `gamma > 0`.
pub fn assemble_batch(
    dataset: &Matrix,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<ParticleBatch> {
    let (x0, x1, t) = sample_batch(dataset, config.batch_size, rng)?;
    let (xt, ut) = make_interpolants(&x0, &x1, &t);
    let weights = if config.weight_spec.gamma > 0.0 {
        weigh_batch(&xt, &config.weight_spec)?.weights
    } else {
        vec![1.0; config.batch_size]
    };
    Ok(ParticleBatch {
        x0,
        x1,
        t,
        xt,
        ut,
        weights,
    })
}

const DIVERGENCE_LOSS: f64 = 1e6;

/// Runs the full training loop. Deterministic given the config seed; emits
/// checkpoints when a directory is configured. On divergence the error keeps
/// the iteration and loss, and any checkpoints already written stay on disk.
pub fn train(config: &TrainConfig, dataset: &Matrix) -> Result<(VectorFieldModel, TrainLog)> {
    config.validate()?;
    if dataset.rows() == 0 {
        return Err(Error::EmptyInput("train dataset"));
    }
    let dim = dataset.cols();
    let mut model = VectorFieldModel::new(dim, &config.hidden, config.seed);
    let mut state = OptimizerState::new(&model, config.learning_rate);
    let mut rng = SeededRng::new(config.seed).derive(1);
    let mut log = Vec::with_capacity(config.iterations);

    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for iter in 0..config.iterations {
        let start = Instant::now();
        let batch = assemble_batch(dataset, config, &mut rng)?;
        let (loss, grads) =
            loss_and_gradient(&model, &batch.xt, &batch.t, &batch.ut, &batch.weights)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                iteration: iter,
                loss,
            });
        }
        optimizer_step(&mut model, &grads, &mut state)?;
        log.push(TrainRecord {
            iteration: iter,
            loss,
            ess: effective_sample_size(&batch.weights),
            ms_per_iter: start.elapsed().as_secs_f64() * 1e3,
        });

        if let Some(dir) = &config.checkpoint_dir {
            let done = iter + 1;
            if done % config.checkpoint_every == 0 && done != config.iterations {
                save_model(&model, config, dir, &format!("checkpoint_{done:07}.ckpt"))?;
            }
        }
    }

    if let Some(dir) = &config.checkpoint_dir {
        save_model(&model, config, dir, "checkpoint_final.ckpt")?;
    }
    Ok((model, log))
}

fn save_model(
    model: &VectorFieldModel,
    config: &TrainConfig,
    dir: &Path,
    name: &str,
) -> Result<()> {
    save_checkpoint(
        model,
        config.weight_spec.gamma,
        config.weight_spec.k,
        &dir.join(name),
    )
}

/// Trace of the empirical covariance of minibatch gradients at a fixed model.
///
/// Draws `minibatches` independent batches, computes the weighted-loss
/// gradient for each, and returns the summed per-parameter variance. The
/// model is not updated.
pub fn gradient_variance_probe(
    model: &VectorFieldModel,
    dataset: &Matrix,
    spec: &WeightSpec,
    batch_size: usize,
    minibatches: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if minibatches < 2 {
        return Err(Error::InvalidArg(
            "variance probe needs at least 2 minibatches".to_string(),
        ));
    }
    let p = model.param_count();
    let mut mean = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    for m in 0..minibatches {
        let (x0, x1, t) = sample_batch(dataset, batch_size, rng)?;
        let (xt, ut) = make_interpolants(&x0, &x1, &t);
        let weights = if spec.gamma > 0.0 {
            weigh_batch(&xt, spec)?.weights
        } else {
            vec![1.0; batch_size]
        };
        let (_, grads) = loss_and_gradient(model, &xt, &t, &ut, &weights)?;
        let g = grads.to_vec();
        // Welford update per parameter.
        let count = (m + 1) as f64;
        for i in 0..p {
            let delta = g[i] - mean[i];
            mean[i] += delta / count;
            m2[i] += delta * (g[i] - mean[i]);
        }
    }
    let denom = (minibatches - 1) as f64;
    Ok(m2.iter().map(|v| v / denom).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_checkpoint, VelocityField};
    use crate::sampler::{integrate, Method, SolveSpec};

    #[test]
    fn sample_batch_deterministic() {
        let data = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut a = SeededRng::new(5);
        let mut b = SeededRng::new(5);
        let (x0a, x1a, ta) = sample_batch(&data, 16, &mut a).unwrap();
        let (x0b, x1b, tb) = sample_batch(&data, 16, &mut b).unwrap();
        assert_eq!(x0a.data(), x0b.data());
        assert_eq!(x1a.data(), x1b.data());
        assert_eq!(ta, tb);
    }

    #[test]
    fn sample_batch_empty_dataset_errors() {
        let data = Matrix::zeros(0, 3);
        let mut rng = SeededRng::new(1);
        assert!(sample_batch(&data, 8, &mut rng).is_err());
    }

    #[test]
    fn sample_batch_noise_moments() {
        // Sample mean of x0 within 4/sqrt(B) of 0 per coordinate.
        let data = Matrix::zeros(2, 3);
        let mut data = data;
        data.set(1, 0, 1.0);
        let mut rng = SeededRng::new(2);
        let b = 10_000;
        let (x0, _, _) = sample_batch(&data, b, &mut rng).unwrap();
        for j in 0..3 {
            let mean = (0..b).map(|i| x0.get(i, j)).sum::<f64>() / b as f64;
            assert!(mean.abs() < 4.0 / (b as f64).sqrt(), "coord {j}: {mean}");
        }
    }

    #[test]
    fn sample_batch_times_uniform_ks() {
        // Kolmogorov-Smirnov statistic under the 95% band 1.358/sqrt(n).
        let data = Matrix::zeros(1, 1);
        let mut rng = SeededRng::new(3);
        let n = 100_000;
        let (_, _, mut t) = sample_batch(&data, n, &mut rng).unwrap();
        t.sort_by(|a, b| a.total_cmp(b));
        let mut d = 0.0f64;
        for (i, &ti) in t.iter().enumerate() {
            let cdf = ti; // uniform [0,1]
            d = d.max(((i + 1) as f64 / n as f64 - cdf).abs());
            d = d.max((cdf - i as f64 / n as f64).abs());
        }
        assert!(d < 1.358 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn interpolants_endpoints_and_hand_value() {
        let x0 = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let x1 = Matrix::from_rows(&[vec![2.0, 4.0]]).unwrap();
        let (xt, ut) = make_interpolants(&x0, &x1, &[0.0]);
        assert_eq!(xt.data(), x0.data());
        assert_eq!(ut.row(0), &[2.0, 4.0]);
        let (xt, _) = make_interpolants(&x0, &x1, &[1.0]);
        assert_eq!(xt.data(), x1.data());
        let (xt, ut) = make_interpolants(&x0, &x1, &[0.25]);
        assert_eq!(xt.row(0), &[0.5, 1.0]);
        assert_eq!(ut.row(0), &[2.0, 4.0]);
    }

    #[test]
    fn interpolants_time_derivative_is_target() {
        // (xt(t+h) - xt(t-h)) / 2h equals ut exactly for the linear path.
        let mut rng = SeededRng::new(4);
        let mut x0 = Matrix::zeros(5, 3);
        let mut x1 = Matrix::zeros(5, 3);
        rng.fill_normal(x0.data_mut());
        rng.fill_normal(x1.data_mut());
        let t: Vec<f64> = (0..5).map(|_| 0.25 + 0.5 * rng.uniform()).collect();
        let h = 0.125; // power of two, keeps the difference quotient exact
        let tp: Vec<f64> = t.iter().map(|v| v + h).collect();
        let tm: Vec<f64> = t.iter().map(|v| v - h).collect();
        let (xp, ut) = make_interpolants(&x0, &x1, &tp);
        let (xm, _) = make_interpolants(&x0, &x1, &tm);
        for i in 0..5 {
            for j in 0..3 {
                let fd = (xp.get(i, j) - xm.get(i, j)) / (2.0 * h);
                assert!((fd - ut.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_zero_matches_unweighted_loop_bitwise() {
        let data = {
            let mut rng = SeededRng::new(77);
            let mut m = Matrix::zeros(64, 2);
            rng.fill_normal(m.data_mut());
            m
        };
        let mut config = TrainConfig::new(0.0, 8, 40, 9);
        config.batch_size = 16;
        config.hidden = vec![8, 8];
        let (model, _) = train(&config, &data).unwrap();

        // Hand-rolled unweighted loop sharing the same primitives and rng use.
        let mut reference = VectorFieldModel::new(2, &config.hidden, config.seed);
        let mut state = OptimizerState::new(&reference, config.learning_rate);
        let mut rng = SeededRng::new(config.seed).derive(1);
        for _ in 0..config.iterations {
            let (x0, x1, t) = sample_batch(&data, config.batch_size, &mut rng).unwrap();
            let (xt, ut) = make_interpolants(&x0, &x1, &t);
            let ones = vec![1.0; config.batch_size];
            let (_, grads) = loss_and_gradient(&reference, &xt, &t, &ut, &ones).unwrap();
            optimizer_step(&mut reference, &grads, &mut state).unwrap();
        }
        let a = model.params_to_vec();
        let b = reference.params_to_vec();
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn train_reproducible_and_ess_one_at_gamma_zero() {
        let data = {
            let mut rng = SeededRng::new(5);
            let mut m = Matrix::zeros(32, 2);
            rng.fill_normal(m.data_mut());
            m
        };
        let mut config = TrainConfig::new(0.0, 4, 25, 3);
        config.batch_size = 8;
        config.hidden = vec![8];
        let (m1, log1) = train(&config, &data).unwrap();
        let (m2, log2) = train(&config, &data).unwrap();
        assert_eq!(m1.params_to_vec(), m2.params_to_vec());
        for (a, b) in log1.iter().zip(log2.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.ess, 1.0);
        }
    }

    #[test]
    fn train_ess_in_unit_interval_for_positive_gamma() {
        let data = {
            let mut rng = SeededRng::new(6);
            let mut m = Matrix::zeros(64, 2);
            rng.fill_normal(m.data_mut());
            m
        };
        let mut config = TrainConfig::new(1.0, 4, 15, 4);
        config.batch_size = 16;
        config.hidden = vec![8];
        let (_, log) = train(&config, &data).unwrap();
        for rec in &log {
            assert!(rec.ess > 0.0 && rec.ess <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn train_constant_dataset_learns_transport_to_one() {
        // Dataset = {1.0}: the flow from any x0 must land at 1.
        let data = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let mut config = TrainConfig::new(0.0, 4, 1500, 11);
        config.batch_size = 32;
        config.hidden = vec![32, 32];
        let (model, _) = train(&config, &data).unwrap();
        let x0 = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let report = integrate(
            &model,
            &x0,
            &SolveSpec {
                method: Method::Rk4,
                steps: 64,
            },
        )
        .unwrap();
        let endpoint = report.samples.get(0, 0);
        assert!(
            (endpoint - 1.0).abs() < 0.05,
            "integrated endpoint {endpoint}"
        );
    }

    #[test]
    fn train_loss_halves_on_two_gaussian_toy() {
        // 2-D mixture of two Gaussians at +-(3, 0). Reference run reaches a
        // ratio of ~0.42 between the late-loss plateau and the untrained
        // loss; the weighted loss keeps an intrinsic conditional-variance
        // floor, so the band is 0.5, not zero.
        let mut rng = SeededRng::new(12);
        let n = 512;
        let mut data = Matrix::zeros(n, 2);
        for i in 0..n {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            data.set(i, 0, sign * 3.0 + 0.3 * rng.normal());
            data.set(i, 1, 0.3 * rng.normal());
        }
        let mut config = TrainConfig::new(0.0, 8, 2000, 13);
        config.batch_size = 64;
        config.hidden = vec![32, 32];
        config.learning_rate = 3e-3;
        let (_, log) = train(&config, &data).unwrap();
        let head: f64 = log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let tail: f64 = log[1800..].iter().map(|r| r.loss).sum::<f64>() / 200.0;
        assert!(
            tail < 0.5 * head,
            "loss did not halve: head {head}, tail {tail}"
        );
    }

    #[test]
    fn train_writes_checkpoints_and_retains_cadence() {
        let dir = std::env::temp_dir().join("gfm_train_ckpts");
        let _ = std::fs::remove_dir_all(&dir);
        let data = {
            let mut rng = SeededRng::new(8);
            let mut m = Matrix::zeros(16, 2);
            rng.fill_normal(m.data_mut());
            m
        };
        let mut config = TrainConfig::new(0.5, 4, 25, 3);
        config.batch_size = 8;
        config.hidden = vec![4];
        config.checkpoint_every = 10;
        config.checkpoint_dir = Some(dir.clone());
        let (model, _) = train(&config, &data).unwrap();
        assert!(dir.join("checkpoint_0000010.ckpt").exists());
        assert!(dir.join("checkpoint_0000020.ckpt").exists());
        let (loaded, meta) = load_checkpoint(&dir.join("checkpoint_final.ckpt")).unwrap();
        assert_eq!(meta.gamma, 0.5);
        assert_eq!(loaded.params_to_vec(), model.params_to_vec());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn variance_probe_zero_for_deterministic_setup() {
        // One data point, and a model that already fits every possible batch?
        // Deterministic case: dataset of one point with zero noise influence is
        // impossible (x0 is random), so instead fix the trivial zero-parameter
        // model where every gradient is empty.
        let model = VectorFieldModel::new(0, &[], 0);
        let data = Matrix::zeros(1, 0);
        let mut rng = SeededRng::new(5);
        let trace = gradient_variance_probe(
            &model,
            &data,
            &WeightSpec::new(0.0, 1),
            4,
            30,
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace, 0.0);
    }

    #[test]
    fn variance_probe_monte_carlo_scaling() {
        // The standard error of the trace estimate shrinks like 1/sqrt(M):
        // quadrupling M roughly halves the spread over repetitions.
        let mut rng = SeededRng::new(21);
        let mut data = Matrix::zeros(128, 2);
        rng.fill_normal(data.data_mut());
        let model = VectorFieldModel::new(2, &[8], 3);
        let spec = WeightSpec::new(0.0, 4);
        let spread = |m: usize, reps: usize, rng: &mut SeededRng| -> f64 {
            let vals: Vec<f64> = (0..reps)
                .map(|_| {
                    gradient_variance_probe(&model, &data, &spec, 16, m, rng).unwrap()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / reps as f64;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
        };
        let s_small = spread(30, 24, &mut rng);
        let s_large = spread(120, 24, &mut rng);
        let ratio = s_small / s_large;
        assert!(
            ratio > 1.3 && ratio < 3.5,
            "expected ~2x standard error reduction, got {ratio}"
        );
    }

    struct ZeroField(usize);
    impl VelocityField for ZeroField {
        fn dim(&self) -> usize {
            self.0
        }
        fn eval_batch(&self, _xs: &Matrix, _t: f64, out: &mut Matrix) {
            for v in out.data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn divergence_guard_trips() {
        // A dataset far outside float range cannot diverge, but a huge
        // learning rate can; the guard must fire with the iteration index.
        let mut rng = SeededRng::new(30);
        let mut data = Matrix::zeros(32, 2);
        rng.fill_normal(data.data_mut());
        for v in data.data_mut() {
            *v *= 1e8;
        }
        let mut config = TrainConfig::new(0.0, 4, 50, 3);
        config.batch_size = 8;
        config.hidden = vec![4];
        match train(&config, &data) {
            Err(Error::Diverged { loss, .. }) => assert!(loss > DIVERGENCE_LOSS),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
