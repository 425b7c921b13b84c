//! Fully-connected vector field `v(x, t)` with exact reverse-mode gradients.
//!
//! Time is appended to `x` as one extra input coordinate, hidden layers use
//! tanh, and the output layer is linear. The default architecture is three
//! hidden layers of width 128; smooth activations keep the Jacobian-based
//! roughness metrics well defined everywhere.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, SeededRng};

/// Default hidden widths used by the experiment drivers.
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

/// Anything that can be evaluated as a velocity field on a batch of states.
///
/// ODE solvers and field metrics are written against this trait so tests can
/// substitute analytic fields (zero, constant, linear) and counting wrappers.
pub trait VelocityField {
    fn dim(&self) -> usize;
    /// Evaluates the field at every row of `xs` at a shared time `t`.
    fn eval_batch(&self, xs: &Matrix, t: f64, out: &mut Matrix);

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let xs = Matrix::from_rows(&[x.to_vec()]).expect("nonempty point");
        let mut out = Matrix::zeros(1, self.dim());
        self.eval_batch(&xs, t, &mut out);
        out.row(0).to_vec()
    }
}

/// Multilayer perceptron vector field with parameters in 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>, // weights[l] has shape (layer_dims[l+1], layer_dims[l])
    biases: Vec<Vec<f64>>,
    seed: u64,
}

impl VectorFieldModel {
    /// Glorot-uniform initialization, biases zero, output layer scaled by
    /// 0.01 so the initial field is near zero.
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut layer_dims = Vec::with_capacity(hidden.len() + 2);
        layer_dims.push(dim + 1);
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(dim);

        let mut rng = SeededRng::new(seed);
        let n_layers = layer_dims.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l == n_layers - 1 { 0.01 } else { 1.0 };
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = scale * bound * (2.0 * rng.uniform() - 1.0);
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        VectorFieldModel {
            layer_dims,
            weights,
            biases,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.data().len())
            .chain(self.biases.iter().map(|b| b.len()))
            .sum()
    }

    pub fn layer_weights_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.weights[layer]
    }

    pub fn layer_biases_mut(&mut self, layer: usize) -> &mut Vec<f64> {
        &mut self.biases[layer]
    }

    /// Flattens parameters in checkpoint order: per layer, row-major weights
    /// then biases.
    pub fn params_to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.n_layers() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_params_from_vec(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimMismatch {
                what: "set_params_from_vec",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in 0..self.weights.len() {
            let wlen = self.weights[l].data().len();
            self.weights[l]
                .data_mut()
                .copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.layer_dims[0] - 1;
        if x.len() != d {
            return Err(Error::DimMismatch {
                what: "forward input",
                expected: d,
                got: x.len(),
            });
        }
        let mut a: Vec<f64> = Vec::with_capacity(d + 1);
        a.extend_from_slice(x);
        a.push(t);
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let w = &self.weights[l];
            let mut z: Vec<f64> = (0..w.rows())
                .map(|j| dot(w.row(j), &a) + self.biases[l][j])
                .collect();
            if l != last {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass over a batch with per-sample times; returns activations
    /// of every layer (index 0 = augmented input) for reuse in backprop.
    fn forward_batch_full(&self, xs: &Matrix, ts: &[f64]) -> Result<Vec<Matrix>> {
        let b = xs.rows();
        let d = self.layer_dims[0] - 1;
        if xs.cols() != d {
            return Err(Error::DimMismatch {
                what: "forward_batch input",
                expected: d,
                got: xs.cols(),
            });
        }
        if ts.len() != b {
            return Err(Error::DimMismatch {
                what: "forward_batch times",
                expected: b,
                got: ts.len(),
            });
        }
        let mut act = Vec::with_capacity(self.n_layers() + 1);
        let mut a0 = Matrix::zeros(b, d + 1);
        for i in 0..b {
            a0.row_mut(i)[..d].copy_from_slice(xs.row(i));
            a0.row_mut(i)[d] = ts[i];
        }
        act.push(a0);
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let w = &self.weights[l];
            let prev = &act[l];
            let mut z = Matrix::zeros(b, w.rows());
            for i in 0..b {
                let out_row = z.row_mut(i);
                // borrow juggling: recompute row pointer from prev each j
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o = dot(w.row(j), prev.row(i)) + self.biases[l][j];
                }
            }
            if l != last {
                for v in z.data_mut() {
                    *v = v.tanh();
                }
            }
            if !z.is_finite() {
                return Err(Error::ForwardNaN { layer: l });
            }
            act.push(z);
        }
        Ok(act)
    }

    pub fn forward_batch(&self, xs: &Matrix, ts: &[f64]) -> Result<Matrix> {
        Ok(self.forward_batch_full(xs, ts)?.pop().unwrap())
    }
}

impl VelocityField for VectorFieldModel {
    fn dim(&self) -> usize {
        VectorFieldModel::dim(self)
    }

    fn eval_batch(&self, xs: &Matrix, t: f64, out: &mut Matrix) {
        let ts = vec![t; xs.rows()];
        let res = self
            .forward_batch(xs, &ts)
            .expect("velocity field evaluation failed");
        out.data_mut().copy_from_slice(res.data());
    }
}

/// Parameter-shaped accumulator for `dL/dtheta`.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl GradientBuffer {
    pub fn zeros_like(model: &VectorFieldModel) -> Self {
        GradientBuffer {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

/// Weighted regression loss and its exact gradient.
///
/// `loss = (1/B) sum_i w_i ||v(xt_i, t_i) - ut_i||^2`. Samples are reduced in
/// a canonical content-sorted order, so the result is invariant under any
/// permutation of the batch, bit for bit.
pub fn loss_and_gradient(
    model: &VectorFieldModel,
    xt: &Matrix,
    ts: &[f64],
    ut: &Matrix,
    weights: &[f64],
) -> Result<(f64, GradientBuffer)> {
    let b = xt.rows();
    if ut.rows() != b || ts.len() != b || weights.len() != b {
        return Err(Error::DimMismatch {
            what: "loss_and_gradient batch",
            expected: b,
            got: ut.rows().min(ts.len()).min(weights.len()),
        });
    }

    let order = canonical_order(xt, ts, ut, weights);
    let xt_s = permute_rows(xt, &order);
    let ts_s: Vec<f64> = order.iter().map(|&i| ts[i]).collect();
    let ut_s = permute_rows(ut, &order);
    let w_s: Vec<f64> = order.iter().map(|&i| weights[i]).collect();

    let act = model.forward_batch_full(&xt_s, &ts_s)?;
    let v = act.last().unwrap();
    let d = model.dim();

    // Per-sample residual terms, then loss in the canonical order.
    let mut loss = 0.0;
    let mut delta = Matrix::zeros(b, d);
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let mut sq = 0.0;
        for j in 0..d {
            let r = v.get(i, j) - ut_s.get(i, j);
            sq += r * r;
            delta.set(i, j, 2.0 * w_s[i] * inv_b * r);
        }
        loss += w_s[i] * sq;
    }
    loss *= inv_b;

    let mut grads = GradientBuffer::zeros_like(model);
    // Backward through layers; delta holds dL/dz of the current layer.
    for l in (0..model.n_layers()).rev() {
        let prev = &act[l];
        let gw = &mut grads.weights[l];
        let gb = &mut grads.biases[l];
        let out_dim = gw.rows();
        for i in 0..b {
            let drow = delta.row(i);
            let arow = prev.row(i);
            for j in 0..out_dim {
                let dj = drow[j];
                if dj != 0.0 {
                    let grow = gw.row_mut(j);
                    for (g, a) in grow.iter_mut().zip(arow.iter()) {
                        *g += dj * a;
                    }
                }
                gb[j] += dj;
            }
        }
        if l > 0 {
            // delta_prev = (delta . W) * (1 - a_prev^2), tanh hidden layers.
            let w = &model.weights[l];
            let in_dim = w.cols();
            let mut next = Matrix::zeros(b, in_dim);
            for i in 0..b {
                let drow = delta.row(i);
                let nrow = next.row_mut(i);
                for j in 0..out_dim {
                    let dj = drow[j];
                    if dj != 0.0 {
                        let wrow = w.row(j);
                        for (nv, wv) in nrow.iter_mut().zip(wrow.iter()) {
                            *nv += dj * wv;
                        }
                    }
                }
                let arow = prev.row(i);
                for (nv, a) in nrow.iter_mut().zip(arow.iter()) {
                    *nv *= 1.0 - a * a;
                }
            }
            delta = next;
        }
    }
    Ok((loss, grads))
}

/// Loss only (used by the finite-difference gradient check).
pub fn loss_only(
    model: &VectorFieldModel,
    xt: &Matrix,
    ts: &[f64],
    ut: &Matrix,
    weights: &[f64],
) -> Result<f64> {
    let order = canonical_order(xt, ts, ut, weights);
    let xt_s = permute_rows(xt, &order);
    let ts_s: Vec<f64> = order.iter().map(|&i| ts[i]).collect();
    let ut_s = permute_rows(ut, &order);
    let w_s: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    let v = model.forward_batch(&xt_s, &ts_s)?;
    let b = xt.rows();
    let d = model.dim();
    let mut loss = 0.0;
    for i in 0..b {
        let mut sq = 0.0;
        for j in 0..d {
            let r = v.get(i, j) - ut_s.get(i, j);
            sq += r * r;
        }
        loss += w_s[i] * sq;
    }
    Ok(loss / b as f64)
}

fn canonical_order(xt: &Matrix, ts: &[f64], ut: &Matrix, weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..xt.rows()).collect();
    order.sort_by(|&a, &c| {
        ts[a]
            .total_cmp(&ts[c])
            .then_with(|| cmp_slices(xt.row(a), xt.row(c)))
            .then_with(|| cmp_slices(ut.row(a), ut.row(c)))
            .then_with(|| weights[a].total_cmp(&weights[c]))
    });
    order
}

fn cmp_slices(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let o = x.total_cmp(y);
        if o != std::cmp::Ordering::Equal {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}

fn permute_rows(m: &Matrix, order: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (new_i, &old_i) in order.iter().enumerate() {
        out.row_mut(new_i).copy_from_slice(m.row(old_i));
    }
    out
}

/// Compares the reverse-mode gradient of the loss against central finite
/// differences, parameter by parameter. Returns the maximum relative error
/// with denominator `max(|a|, |b|, 1e-12)`.
pub fn grad_check(
    model: &VectorFieldModel,
    xt: &Matrix,
    ts: &[f64],
    ut: &Matrix,
    weights: &[f64],
    h: f64,
) -> Result<f64> {
    let (_, grads) = loss_and_gradient(model, xt, ts, ut, weights)?;
    let analytic = grads.to_vec();
    let mut params = model.params_to_vec();
    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    for p in 0..params.len() {
        let orig = params[p];
        params[p] = orig + h;
        probe.set_params_from_vec(&params)?;
        let lp = loss_only(&probe, xt, ts, ut, weights)?;
        params[p] = orig - h;
        probe.set_params_from_vec(&params)?;
        let lm = loss_only(&probe, xt, ts, ut, weights)?;
        params[p] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic[p];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    probe.set_params_from_vec(&params)?;
    Ok(max_rel)
}

/// Adam state with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(model: &VectorFieldModel, learning_rate: f64) -> Self {
        OptimizerState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; model.param_count()],
            second_moment: vec![0.0; model.param_count()],
        }
    }
}

/// One Adam step. Errors on non-finite gradients and leaves the model as is.
pub fn optimizer_step(
    model: &mut VectorFieldModel,
    grads: &GradientBuffer,
    state: &mut OptimizerState,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let g = grads.to_vec();
    if g.len() != state.first_moment.len() {
        return Err(Error::DimMismatch {
            what: "optimizer_step",
            expected: state.first_moment.len(),
            got: g.len(),
        });
    }
    state.step += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let mut params = model.params_to_vec();
    for i in 0..g.len() {
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g[i];
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g[i] * g[i];
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    model.set_params_from_vec(&params)
}

/// Central-difference Jacobian of the field in `x`; entry `(i, j)` is
/// `dv_i/dx_j`.
pub fn jacobian_fd(field: &dyn VelocityField, x: &[f64], t: f64, h: f64) -> Matrix {
    let d = x.len();
    let out_dim = field.dim();
    let mut jac = Matrix::zeros(out_dim, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        let orig = xp[j];
        xp[j] = orig + h;
        let vp = field.eval(&xp, t);
        xp[j] = orig - h;
        let vm = field.eval(&xp, t);
        xp[j] = orig;
        for i in 0..out_dim {
            jac.set(i, j, (vp[i] - vm[i]) / (2.0 * h));
        }
    }
    jac
}

/// Checkpoint header: one JSON line followed by the flat little-endian
/// parameter array.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub seed: u64,
    pub gamma: f64,
    pub k: usize,
}

pub fn save_checkpoint(
    model: &VectorFieldModel,
    gamma: f64,
    k: usize,
    path: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        layer_dims: model.layer_dims.clone(),
        activation: "tanh".to_string(),
        seed: model.seed,
        gamma,
        k,
    };
    let header = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(b"\n")?;
    for p in model.params_to_vec() {
        file.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(VectorFieldModel, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".to_string()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if meta.activation != "tanh" {
        return Err(Error::Checkpoint(format!(
            "unsupported activation {}",
            meta.activation
        )));
    }
    if meta.layer_dims.len() < 2 {
        return Err(Error::Checkpoint("layer_dims too short".to_string()));
    }
    let dim = *meta.layer_dims.last().unwrap();
    let hidden = &meta.layer_dims[1..meta.layer_dims.len() - 1];
    if meta.layer_dims[0] != dim + 1 {
        return Err(Error::Checkpoint(
            "input width must be output width + 1".to_string(),
        ));
    }
    let mut model = VectorFieldModel::new(dim, hidden, meta.seed);
    let body = &bytes[newline + 1..];
    if body.len() != model.param_count() * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            model.param_count() * 8,
            body.len()
        )));
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.set_params_from_vec(&params)?;
    Ok((model, meta))
}
