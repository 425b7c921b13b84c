//! Fixed-step ODE integration of a velocity field from noise to data.
//!
//! Only fixed-step methods are offered so the function-evaluation budget is
//! exact: `nfe = steps * stages`, with one batched field evaluation per
//! stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

impl Method {
    pub fn stages(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::InvalidArg(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveSpec {
    pub method: Method,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Endpoint states, one row per input row.
    pub samples: Matrix,
    /// Exact number of field evaluations: `steps * stages`.
    pub nfe: usize,
    /// `steps + 1` snapshots including both endpoints, when recorded.
    pub trajectory: Option<Vec<Matrix>>,
}

/// Advances `dx/dt = v(x, t)` from t = 0 to t = 1 with uniform steps.
pub fn integrate(field: &dyn VelocityField, x0: &Matrix, spec: &SolveSpec) -> Result<SolveReport> {
    run(field, x0, spec, false)
}

/// Same as [`integrate`] but records every intermediate state.
pub fn integrate_trajectory(
    field: &dyn VelocityField,
    x0: &Matrix,
    spec: &SolveSpec,
) -> Result<SolveReport> {
    run(field, x0, spec, true)
}

fn run(
    field: &dyn VelocityField,
    x0: &Matrix,
    spec: &SolveSpec,
    record: bool,
) -> Result<SolveReport> {
    if spec.steps == 0 {
        return Err(Error::InvalidArg("steps must be >= 1".to_string()));
    }
    let (n, d) = (x0.rows(), x0.cols());
    let h = 1.0 / spec.steps as f64;
    let mut x = x0.clone();
    let mut traj = if record { vec![x.clone()] } else { Vec::new() };
    let mut nfe = 0usize;

    let mut k1 = Matrix::zeros(n, d);
    let mut k2 = Matrix::zeros(n, d);
    let mut k3 = Matrix::zeros(n, d);
    let mut k4 = Matrix::zeros(n, d);
    let mut stage = Matrix::zeros(n, d);

    for step in 0..spec.steps {
        let t = step as f64 * h;
        match spec.method {
            Method::Euler => {
                field.eval_batch(&x, t, &mut k1);
                nfe += 1;
                axpy(&mut x, h, &k1);
            }
            Method::Midpoint => {
                field.eval_batch(&x, t, &mut k1);
                nfe += 1;
                stage.data_mut().copy_from_slice(x.data());
                axpy(&mut stage, 0.5 * h, &k1);
                field.eval_batch(&stage, t + 0.5 * h, &mut k2);
                nfe += 1;
                axpy(&mut x, h, &k2);
            }
            Method::Rk4 => {
                field.eval_batch(&x, t, &mut k1);
                nfe += 1;
                stage.data_mut().copy_from_slice(x.data());
                axpy(&mut stage, 0.5 * h, &k1);
                field.eval_batch(&stage, t + 0.5 * h, &mut k2);
                nfe += 1;
                stage.data_mut().copy_from_slice(x.data());
                axpy(&mut stage, 0.5 * h, &k2);
                field.eval_batch(&stage, t + 0.5 * h, &mut k3);
                nfe += 1;
                stage.data_mut().copy_from_slice(x.data());
                axpy(&mut stage, h, &k3);
                field.eval_batch(&stage, t + h, &mut k4);
                nfe += 1;
                let w = h / 6.0;
                let xd = x.data_mut();
                let (a, b, c, dd) = (k1.data(), k2.data(), k3.data(), k4.data());
                for i in 0..xd.len() {
                    xd[i] += w * (a[i] + 2.0 * b[i] + 2.0 * c[i] + dd[i]);
                }
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteState { step });
        }
        if record {
            traj.push(x.clone());
        }
    }
    debug_assert_eq!(nfe, spec.steps * spec.method.stages());
    Ok(SolveReport {
        samples: x,
        nfe,
        trajectory: if record { Some(traj) } else { None },
    })
}

fn axpy(x: &mut Matrix, a: f64, y: &Matrix) {
    let xd = x.data_mut();
    let yd = y.data();
    for i in 0..xd.len() {
        xd[i] += a * yd[i];
    }
}

/// Empirical convergence order on the linear-field problem `dx/dt = x`,
/// fitted as the slope of log error against log step count.
pub fn order_check(method: Method) -> f64 {
    struct Linear;
    impl VelocityField for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn eval_batch(&self, xs: &Matrix, _t: f64, out: &mut Matrix) {
            out.data_mut().copy_from_slice(xs.data());
        }
    }
    let x0 = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    let exact = std::f64::consts::E;
    let step_counts = [4usize, 8, 16, 32, 64];
    let points: Vec<(f64, f64)> = step_counts
        .iter()
        .map(|&steps| {
            let report = integrate(&Linear, &x0, &SolveSpec { method, steps }).unwrap();
            let err = (report.samples.get(0, 0) - exact).abs();
            ((steps as f64).ln(), err.ln())
        })
        .collect();
    // Least-squares slope; the order is its negation.
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    -slope
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

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

    struct ConstField(Vec<f64>);
    impl VelocityField for ConstField {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn eval_batch(&self, xs: &Matrix, _t: f64, out: &mut Matrix) {
            for i in 0..xs.rows() {
                out.row_mut(i).copy_from_slice(&self.0);
            }
        }
    }

    struct LinearField;
    impl VelocityField for LinearField {
        fn dim(&self) -> usize {
            1
        }
        fn eval_batch(&self, xs: &Matrix, _t: f64, out: &mut Matrix) {
            out.data_mut().copy_from_slice(xs.data());
        }
    }

    #[test]
    fn zero_field_identity_flow() {
        let x0 = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        for method in [Method::Euler, Method::Midpoint, Method::Rk4] {
            let r = integrate(&ZeroField(2), &x0, &SolveSpec { method, steps: 7 }).unwrap();
            assert_eq!(r.samples.data(), x0.data());
        }
    }

    #[test]
    fn constant_field_exact_shift() {
        let x0 = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let c = vec![0.5, -0.25];
        for method in [Method::Euler, Method::Midpoint, Method::Rk4] {
            for steps in [1usize, 8, 32] {
                let r = integrate(&ConstField(c.clone()), &x0, &SolveSpec { method, steps }).unwrap();
                assert_eq!(r.samples.get(0, 0), 1.5, "{method:?} {steps}");
                assert_eq!(r.samples.get(0, 1), -1.25);
            }
        }
    }

    #[test]
    fn linear_field_exponential_oracle() {
        let x0 = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let e = std::f64::consts::E;

        let rk4 = integrate(
            &LinearField,
            &x0,
            &SolveSpec {
                method: Method::Rk4,
                steps: 32,
            },
        )
        .unwrap();
        assert!(((rk4.samples.get(0, 0) - e) / e).abs() < 1e-6);

        // Euler error has the closed form e - (1 + 1/n)^n.
        let n = 64usize;
        let euler = integrate(
            &LinearField,
            &x0,
            &SolveSpec {
                method: Method::Euler,
                steps: n,
            },
        )
        .unwrap();
        let err = (euler.samples.get(0, 0) - e).abs();
        let theory = e - (1.0 + 1.0 / n as f64).powi(n as i32);
        assert!(
            (err - theory).abs() / theory < 0.1,
            "euler error {err}, theory {theory}"
        );
    }

    #[test]
    fn nfe_matches_observed_calls() {
        struct Counting<'a> {
            inner: &'a dyn VelocityField,
            calls: Cell<usize>,
        }
        impl VelocityField for Counting<'_> {
            fn dim(&self) -> usize {
                self.inner.dim()
            }
            fn eval_batch(&self, xs: &Matrix, t: f64, out: &mut Matrix) {
                self.calls.set(self.calls.get() + 1);
                self.inner.eval_batch(xs, t, out);
            }
        }
        let x0 = Matrix::from_rows(&[vec![0.4], vec![1.0], vec![-0.3]]).unwrap();
        for (method, stages) in [(Method::Euler, 1), (Method::Midpoint, 2), (Method::Rk4, 4)] {
            let field = Counting {
                inner: &LinearField,
                calls: Cell::new(0),
            };
            let r = integrate(&field, &x0, &SolveSpec { method, steps: 13 }).unwrap();
            assert_eq!(r.nfe, 13 * stages);
            assert_eq!(field.calls.get(), r.nfe);
        }
    }

    #[test]
    fn trajectory_has_steps_plus_one_snapshots() {
        let x0 = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let r = integrate_trajectory(
            &LinearField,
            &x0,
            &SolveSpec {
                method: Method::Midpoint,
                steps: 5,
            },
        )
        .unwrap();
        let traj = r.trajectory.unwrap();
        assert_eq!(traj.len(), 6);
        assert_eq!(traj[0].data(), x0.data());
        assert_eq!(traj[5].data(), r.samples.data());
    }

    #[test]
    fn nonfinite_state_reports_step() {
        struct Blowup;
        impl VelocityField for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn eval_batch(&self, xs: &Matrix, _t: f64, out: &mut Matrix) {
                for (o, x) in out.data_mut().iter_mut().zip(xs.data()) {
                    *o = x * x * 1e200;
                }
            }
        }
        let x0 = Matrix::from_vec(1, 1, vec![1e200]).unwrap();
        match integrate(
            &Blowup,
            &x0,
            &SolveSpec {
                method: Method::Euler,
                steps: 4,
            },
        ) {
            Err(Error::NonFiniteState { step }) => assert_eq!(step, 0),
            other => panic!("expected non-finite state, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn time_reversal_sanity() {
        // Integrating the negated, time-reflected field from the endpoint
        // returns near x0 (within 10x the forward error).
        struct Reversed;
        impl VelocityField for Reversed {
            fn dim(&self) -> usize {
                1
            }
            fn eval_batch(&self, xs: &Matrix, _t: f64, out: &mut Matrix) {
                for (o, x) in out.data_mut().iter_mut().zip(xs.data()) {
                    *o = -x;
                }
            }
        }
        let x0 = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let spec = SolveSpec {
            method: Method::Rk4,
            steps: 32,
        };
        let fwd = integrate(&LinearField, &x0, &spec).unwrap();
        let forward_err = (fwd.samples.get(0, 0) - std::f64::consts::E).abs();
        let back = integrate(&Reversed, &fwd.samples, &spec).unwrap();
        let round_trip = (back.samples.get(0, 0) - 1.0).abs();
        assert!(
            round_trip <= 10.0 * forward_err.max(1e-12),
            "round trip error {round_trip}, forward error {forward_err}"
        );
    }

    #[test]
    fn classical_orders() {
        let euler = order_check(Method::Euler);
        assert!((euler - 1.0).abs() < 0.2, "euler order {euler}");
        let mid = order_check(Method::Midpoint);
        assert!((mid - 2.0).abs() < 0.3, "midpoint order {mid}");
        let rk4 = order_check(Method::Rk4);
        assert!((rk4 - 4.0).abs() < 0.5, "rk4 order {rk4}");
    }
}
