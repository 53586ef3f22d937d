//! Dense helpers shared by the dynamics modules: ODE stepping, matrix
//! exponentials, norms and conversions to `faer`.

use faer::Mat;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default divergence cap on ‖V‖∞.
pub const DIVERGENCE_CAP: f64 = 1e8;

/// How a continuous-time flow is advanced between grid times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Integrator {
    /// Only meaningful for linear flows with a known solution.
    ClosedForm,
    Rk4 { step: f64 },
    Euler { step: f64 },
}

impl Integrator {
    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            Integrator::ClosedForm => Ok(()),
            Integrator::Rk4 { step } | Integrator::Euler { step } => {
                if step > 0.0 && step.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Argument(format!("integrator step must be positive, got {step}")))
                }
            }
        }
    }
}

pub(crate) fn validate_grid(t_grid: &[f64]) -> Result<()> {
    for (i, &t) in t_grid.iter().enumerate() {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::Argument(format!("time grid entry {i} is not a nonnegative finite time: {t}")));
        }
        if i > 0 && t < t_grid[i - 1] {
            return Err(Error::Argument("time grid must be ascending".into()));
        }
    }
    Ok(())
}

pub(crate) struct Path {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub diverged_at: Option<f64>,
}

/// Integrate `dx/dt = drift(x)` from t=0, recording `x` at each grid time.
///
/// Each grid interval is split into the smallest number of equal substeps
/// not exceeding `step`. Integration stops at the first substep whose state
/// is non-finite or exceeds `cap` in sup norm.
pub(crate) fn integrate<F>(drift: F, x0: &DVector<f64>, t_grid: &[f64], integrator: Integrator, cap: f64) -> Result<Path>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    validate_grid(t_grid)?;
    integrator.validate()?;
    let (step, rk4) = match integrator {
        Integrator::Rk4 { step } => (step, true),
        Integrator::Euler { step } => (step, false),
        Integrator::ClosedForm => {
            return Err(Error::Argument("closed-form integration requested from the generic stepper".into()))
        }
    };
    let mut path = Path { times: Vec::with_capacity(t_grid.len()), states: Vec::with_capacity(t_grid.len()), diverged_at: None };
    let mut x = x0.clone();
    let mut t = 0.0;
    for &target in t_grid {
        let span = target - t;
        if span > 0.0 {
            let n = ((span / step) - 1e-9).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for k in 0..n {
                x = if rk4 { rk4_step(&drift, &x, h) } else { &x + drift(&x) * h };
                let now = t + h * (k + 1) as f64;
                if !is_bounded(&x, cap) {
                    path.diverged_at = Some(now);
                    return Ok(path);
                }
            }
        }
        t = target;
        path.times.push(target);
        path.states.push(x.clone());
    }
    Ok(path)
}

pub(crate) fn rk4_step<F>(drift: &F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = drift(x);
    let k2 = drift(&(x + &k1 * (h / 2.0)));
    let k3 = drift(&(x + &k2 * (h / 2.0)));
    let k4 = drift(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

pub(crate) fn is_bounded(x: &DVector<f64>, cap: f64) -> bool {
    x.iter().all(|v| v.is_finite() && v.abs() <= cap)
}

/// Matrix exponential by Padé scaling and squaring.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Dimension { expected: a.nrows(), actual: a.ncols() });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential of a non-finite matrix".into()));
    }
    let e = a.clone().exp();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "matrix exponential overflowed (input max |a_ij| = {:.3e})",
            a.amax()
        )));
    }
    Ok(e)
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

pub(crate) fn to_faer(a: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub(crate) fn complex_from_faer(a: faer::MatRef<'_, Complex64>) -> DMatrix<Complex64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Solve `a x = b` by LU with an explicit singularity check.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::Dimension { expected: a.nrows(), actual: b.len() });
    }
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Solve("matrix is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solve("solution is not finite".into()));
    }
    Ok(x)
}

/// Canonical float rendering for CSV output: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
