//! Continuous-time Monte Carlo and TD value flows, synchronous expected TD
//! sweeps, n-step targets and per-eigencomponent error tracking.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, fmt_f64, Integrator, DIVERGENCE_CAP};
use crate::mdp::{MarkovMdp, ValueFunction};
use crate::spectral::SpectralDecomposition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowRule {
    MonteCarlo,
    TemporalDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub rule: FlowRule,
    pub t_grid: Vec<f64>,
    pub integrator: Integrator,
}

impl FlowSpec {
    pub fn run(&self, v0: &ValueFunction, mdp: &MarkovMdp) -> Result<ValueTrajectory> {
        match self.rule {
            FlowRule::MonteCarlo => mc_trajectory(v0, mdp, &self.t_grid),
            FlowRule::TemporalDifference => td_trajectory(v0, mdp, &self.t_grid, self.integrator),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueTrajectory {
    times: Vec<f64>,
    snapshots: Vec<ValueFunction>,
    diverged_at: Option<f64>,
}

impl ValueTrajectory {
    pub(crate) fn from_parts(times: Vec<f64>, snapshots: Vec<DVector<f64>>, diverged_at: Option<f64>) -> Self {
        let snapshots = snapshots.into_iter().map(|v| ValueFunction::new(v).expect("finite snapshot")).collect();
        ValueTrajectory { times, snapshots, diverged_at }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn snapshots(&self) -> &[ValueFunction] {
        &self.snapshots
    }

    pub fn diverged_at(&self) -> Option<f64> {
        self.diverged_at
    }

    pub fn last(&self) -> Option<&ValueFunction> {
        self.snapshots.last()
    }

    /// Rows `(time, state_index, value)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,state_index,value\n");
        for (t, v) in self.times.iter().zip(&self.snapshots) {
            for (i, x) in v.values().iter().enumerate() {
                let _ = writeln!(out, "{},{i},{}", fmt_f64(*t), fmt_f64(*x));
            }
        }
        out
    }
}

/// V_t = e^{−t}(V_0 − V^π) + V^π.
pub fn mc_trajectory(v0: &ValueFunction, mdp: &MarkovMdp, t_grid: &[f64]) -> Result<ValueTrajectory> {
    check_len(mdp.n_states(), v0.len())?;
    linalg::validate_grid(t_grid)?;
    let v_pi = mdp.value_function()?;
    let gap = v0.values() - v_pi.values();
    let snapshots = t_grid
        .iter()
        .map(|&t| if t == 0.0 { v0.values().clone() } else { &gap * (-t).exp() + v_pi.values() })
        .collect();
    Ok(ValueTrajectory::from_parts(t_grid.to_vec(), snapshots, None))
}

/// V_t = exp(−t(I − γP^π))(V_0 − V^π) + V^π, either in closed form or by
/// integrating ∂_tV = −(I − γP^π)V + R^π.
pub fn td_trajectory(v0: &ValueFunction, mdp: &MarkovMdp, t_grid: &[f64], integrator: Integrator) -> Result<ValueTrajectory> {
    check_len(mdp.n_states(), v0.len())?;
    linalg::validate_grid(t_grid)?;
    let a = mdp.td_operator();
    match integrator {
        Integrator::ClosedForm => {
            let v_pi = mdp.value_function()?;
            let gap = v0.values() - v_pi.values();
            let snapshots = t_grid
                .iter()
                .map(|&t| {
                    if t == 0.0 {
                        return Ok(v0.values().clone());
                    }
                    Ok(linalg::expm(&(&a * -t))? * &gap + v_pi.values())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ValueTrajectory::from_parts(t_grid.to_vec(), snapshots, None))
        }
        _ => {
            let r = mdp.reward();
            let path = linalg::integrate(|v| r - &a * v, v0.values(), t_grid, integrator, f64::INFINITY)?;
            Ok(ValueTrajectory::from_parts(path.times, path.states, path.diverged_at))
        }
    }
}

/// Synchronous expected updates V ← V + α(T^πV − V); snapshot k is taken
/// after k sweeps and stamped with time k.
pub fn discrete_td_sweep(v0: &ValueFunction, mdp: &MarkovMdp, step_size: f64, n_sweeps: usize) -> Result<ValueTrajectory> {
    check_len(mdp.n_states(), v0.len())?;
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::Argument(format!("step size must be positive, got {step_size}")));
    }
    let (p, r, g) = (mdp.transition(), mdp.reward(), mdp.discount());
    let mut v = v0.values().clone();
    let mut times = vec![0.0];
    let mut snapshots = vec![v.clone()];
    for k in 1..=n_sweeps {
        let residual = r + p * &v * g - &v;
        v += residual * step_size;
        if !linalg::is_bounded(&v, DIVERGENCE_CAP) {
            return Ok(ValueTrajectory::from_parts(times, snapshots, Some(k as f64)));
        }
        times.push(k as f64);
        snapshots.push(v.clone());
    }
    Ok(ValueTrajectory::from_parts(times, snapshots, None))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NSteps {
    Finite(usize),
    Infinite,
}

/// Σ_{k<n} γ^k (P^π)^k R^π, or V^π for n = ∞.
pub fn n_step_return_target(mdp: &MarkovMdp, n: NSteps) -> Result<ValueFunction> {
    match n {
        NSteps::Infinite => mdp.value_function(),
        NSteps::Finite(0) => Err(Error::Argument("n-step target needs n ≥ 1".into())),
        NSteps::Finite(n) => {
            let mut term = mdp.reward().clone();
            let mut acc = term.clone();
            for _ in 1..n {
                term = mdp.transition() * term * mdp.discount();
                acc += &term;
            }
            ValueFunction::new(acc)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSubset {
    pub name: String,
    pub indices: Vec<usize>,
}

impl EigenSubset {
    /// The `count` eigenvectors with the largest real eigenvalues.
    pub fn top(count: usize) -> Self {
        EigenSubset { name: format!("top-{count}"), indices: (0..count).collect() }
    }

    /// The `count` eigenvectors with the smallest real eigenvalues.
    pub fn bottom(count: usize, n: usize) -> Self {
        EigenSubset { name: format!("bottom-{count}"), indices: (n.saturating_sub(count)..n).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetErrorSeries {
    pub name: String,
    pub indices: Vec<usize>,
    /// ‖Π_S V^π‖ for the orthogonal projector onto span{v_i : i ∈ S}.
    pub denominator: f64,
    /// Mean over i ∈ S of |⟨V_t − V^π, v_i⟩| / denominator.
    pub mean_component_error: Vec<f64>,
    /// ‖Π_S(V_t − V^π)‖ / denominator.
    pub projection_error: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentErrorTable {
    pub times: Vec<f64>,
    pub subsets: Vec<SubsetErrorSeries>,
    /// Per subset, per time, per member: |⟨V_t − V^π, v_i⟩| / denominator.
    pub component_errors: Vec<Vec<Vec<f64>>>,
}

/// Orthonormal basis of span{Re v_i, Im v_i : i ∈ S}, rank-revealed by SVD.
fn span_basis(decomp: &SpectralDecomposition, indices: &[usize]) -> DMatrix<f64> {
    let n = decomp.n();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for &i in indices {
        let v = decomp.eigenvector(i);
        cols.push(v.map(|z| z.re));
        if v.iter().any(|z| z.im != 0.0) {
            cols.push(v.map(|z| z.im));
        }
    }
    if cols.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    let b = DMatrix::from_columns(&cols);
    let svd = b.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > 1e-10 * smax).collect();
    DMatrix::from_fn(n, keep.len(), |r, c| u[(r, keep[c])])
}

/// Normalized error of each trajectory snapshot along eigen-subsets.
///
/// Component errors use inner products with the unit eigenvectors rather
/// than basis coefficients, so they stay meaningful when the eigenbasis is
/// badly conditioned.
pub fn component_errors(
    trajectory: &ValueTrajectory,
    decomp: &SpectralDecomposition,
    v_pi: &ValueFunction,
    subsets: &[EigenSubset],
) -> Result<ComponentErrorTable> {
    check_len(decomp.n(), v_pi.len())?;
    let mut series = Vec::with_capacity(subsets.len());
    let mut per_component = Vec::with_capacity(subsets.len());
    for subset in subsets {
        if let Some(i) = subset.indices.iter().find(|&&i| i >= decomp.n()) {
            return Err(Error::Argument(format!("eigen index {i} out of range in subset {}", subset.name)));
        }
        let basis = span_basis(decomp, &subset.indices);
        let denominator = (basis.transpose() * v_pi.values()).norm();
        if denominator == 0.0 {
            return Err(Error::Numeric(format!("V^π has no component in subset {}", subset.name)));
        }
        let vecs: Vec<DVector<Complex64>> = subset.indices.iter().map(|&i| decomp.eigenvector(i)).collect();
        let mut mean = Vec::with_capacity(trajectory.times.len());
        let mut proj = Vec::with_capacity(trajectory.times.len());
        let mut comps = Vec::with_capacity(trajectory.times.len());
        for snap in &trajectory.snapshots {
            let gap = (snap.values() - v_pi.values()).map(|x| Complex64::new(x, 0.0));
            let errs: Vec<f64> = vecs.iter().map(|v| v.dotc(&gap).norm() / denominator).collect();
            mean.push(if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 });
            proj.push((basis.transpose() * (snap.values() - v_pi.values())).norm() / denominator);
            comps.push(errs);
        }
        series.push(SubsetErrorSeries {
            name: subset.name.clone(),
            indices: subset.indices.clone(),
            denominator,
            mean_component_error: mean,
            projection_error: proj,
        });
        per_component.push(comps);
    }
    Ok(ComponentErrorTable { times: trajectory.times.clone(), subsets: series, component_errors: per_component })
}

impl ComponentErrorTable {
    /// Rows `(time, eigen_index, re_lambda, normalized_error)`.
    pub fn components_csv(&self, decomp: &SpectralDecomposition) -> String {
        let mut out = String::from("time,eigen_index,re_lambda,normalized_error\n");
        for (k, t) in self.times.iter().enumerate() {
            for (s, subset) in self.subsets.iter().enumerate() {
                for (m, &i) in subset.indices.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{i},{},{}",
                        fmt_f64(*t),
                        fmt_f64(decomp.eigenvalues()[i].re),
                        fmt_f64(self.component_errors[s][k][m])
                    );
                }
            }
        }
        out
    }

    /// Rows `(time, subset, mean_component_error, projection_error)`.
    pub fn subsets_csv(&self) -> String {
        let mut out = String::from("time,subset,mean_component_error,projection_error\n");
        for (k, t) in self.times.iter().enumerate() {
            for s in &self.subsets {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_f64(*t),
                    s.name,
                    fmt_f64(s.mean_component_error[k]),
                    fmt_f64(s.projection_error[k])
                );
            }
        }
        out
    }
}
