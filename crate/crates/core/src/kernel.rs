//! Kernel semi-gradient TD flows, their Monte Carlo analogue, kernel
//! regression generalization curves and the linear feature-map flow.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, fmt_f64, Integrator, DIVERGENCE_CAP};
use crate::mdp::{MarkovMdp, ValueFunction};
use crate::spectral::{project_onto_eigenspace, SpectralDecomposition};
use crate::tabular::{n_step_return_target, NSteps, ValueTrajectory};

#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    Rbf { lengthscale: f64 },
    /// ⟨φ(x), φ(y)⟩ with one feature row per state.
    DotProduct { features: DMatrix<f64> },
    /// Σ_{i∈S} v_i(x) v_i(y) over real eigenvectors stored as columns.
    SpectralSubset { indices: Vec<usize>, basis: DMatrix<f64> },
}

impl KernelSpec {
    pub fn rbf(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::Argument(format!("rbf lengthscale must be positive, got {lengthscale}")));
        }
        Ok(KernelSpec::Rbf { lengthscale })
    }

    pub fn spectral_subset(decomp: &SpectralDecomposition, indices: &[usize]) -> Result<Self> {
        let basis = decomp.real_eigenvectors(indices)?;
        Ok(KernelSpec::SpectralSubset { indices: indices.to_vec(), basis })
    }

    pub fn label(&self) -> String {
        match self {
            KernelSpec::Rbf { lengthscale } => format!("rbf-{lengthscale}"),
            KernelSpec::DotProduct { features } => format!("dot-product-{}", features.ncols()),
            KernelSpec::SpectralSubset { indices, .. } => format!("spectral-{}", indices.len()),
        }
    }
}

pub fn gram_matrix(kernel: &KernelSpec, states_a: &[usize], states_b: &[usize], mdp: &MarkovMdp) -> Result<DMatrix<f64>> {
    let n = mdp.n_states();
    if let Some(s) = states_a.iter().chain(states_b).find(|&&s| s >= n) {
        return Err(Error::Argument(format!("state {s} out of range for {n} states")));
    }
    match kernel {
        KernelSpec::Rbf { lengthscale } => {
            let geometry = mdp.geometry();
            let points = (0..n)
                .map(|s| geometry.metric_point(s).ok_or_else(|| Error::Config("rbf kernel needs a state geometry".into())))
                .collect::<Result<Vec<_>>>()?;
            let denom = 2.0 * lengthscale * lengthscale;
            Ok(DMatrix::from_fn(states_a.len(), states_b.len(), |i, j| {
                let (a, b) = (&points[states_a[i]], &points[states_b[j]]);
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                (-d2 / denom).exp()
            }))
        }
        KernelSpec::DotProduct { features } => {
            check_len(n, features.nrows())?;
            Ok(DMatrix::from_fn(states_a.len(), states_b.len(), |i, j| {
                features.row(states_a[i]).dot(&features.row(states_b[j]))
            }))
        }
        KernelSpec::SpectralSubset { basis, .. } => {
            check_len(n, basis.nrows())?;
            Ok(DMatrix::from_fn(states_a.len(), states_b.len(), |i, j| {
                basis.row(states_a[i]).dot(&basis.row(states_b[j]))
            }))
        }
    }
}

/// K(X_train, X_train) and K(X_test, X_train) for a train/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitKernelOperator {
    pub k_train_train: DMatrix<f64>,
    pub k_test_train: DMatrix<f64>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl SplitKernelOperator {
    pub fn new(kernel: &KernelSpec, mdp: &MarkovMdp, train_indices: &[usize]) -> Result<Self> {
        let train = validate_train(mdp.n_states(), train_indices, true)?;
        let test: Vec<usize> = (0..mdp.n_states()).filter(|s| !train.contains(s)).collect();
        Ok(SplitKernelOperator {
            k_train_train: gram_matrix(kernel, &train, &train, mdp)?,
            k_test_train: gram_matrix(kernel, &test, &train, mdp)?,
            train_indices: train,
            test_indices: test,
        })
    }

    /// V_0(test) + κ K̃^{-1}[V_t(train) − V_0(train)], valid for invertible K̃.
    pub fn test_state_prediction(&self, v0: &ValueFunction, vt: &ValueFunction) -> Result<DVector<f64>> {
        let pick = |v: &ValueFunction, idx: &[usize]| DVector::from_fn(idx.len(), |i, _| v.values()[idx[i]]);
        let delta = pick(vt, &self.train_indices) - pick(v0, &self.train_indices);
        let w = linalg::solve(&self.k_train_train, &delta)?;
        Ok(pick(v0, &self.test_indices) + &self.k_test_train * w)
    }
}

fn validate_train(n: usize, train: &[usize], proper: bool) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::Argument("train set must be nonempty".into()));
    }
    let mut seen = vec![false; n];
    for &s in train {
        if s >= n {
            return Err(Error::Argument(format!("train state {s} out of range for {n} states")));
        }
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::Argument(format!("train state {s} listed twice")));
        }
    }
    if proper && train.len() == n {
        return Err(Error::Argument("train set must be a proper subset for a train/test split".into()));
    }
    Ok(train.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    pub integrator: Integrator,
    /// Divergence threshold on ‖V‖∞.
    pub cap: f64,
}

impl FlowOptions {
    pub fn rk4(step: f64) -> Self {
        FlowOptions { integrator: Integrator::Rk4 { step }, cap: DIVERGENCE_CAP }
    }

    pub fn euler(step: f64) -> Self {
        FlowOptions { integrator: Integrator::Euler { step }, cap: DIVERGENCE_CAP }
    }
}

/// 1/‖K(X_train, X_train)‖₂: the unit Euler step rescaled by the Gram norm.
pub fn normalized_step(kernel: &KernelSpec, mdp: &MarkovMdp, train_indices: &[usize]) -> Result<f64> {
    let train = validate_train(mdp.n_states(), train_indices, false)?;
    let norm = linalg::spectral_norm(&gram_matrix(kernel, &train, &train, mdp)?);
    if norm == 0.0 {
        return Err(Error::Numeric("kernel Gram matrix is zero".into()));
    }
    Ok(1.0 / norm)
}

fn run(drift: impl Fn(&DVector<f64>) -> DVector<f64>, v0: &ValueFunction, t_grid: &[f64], options: &FlowOptions) -> Result<ValueTrajectory> {
    if matches!(options.integrator, Integrator::ClosedForm) {
        return Err(Error::Argument("kernel flows are integrated numerically".into()));
    }
    let path = linalg::integrate(drift, v0.values(), t_grid, options.integrator, options.cap)?;
    Ok(ValueTrajectory::from_parts(path.times, path.states, path.diverged_at))
}

/// ∂_tV = K̃((γP^π − I)V + R^π) over all states.
pub fn kernel_td_flow_full(
    v0: &ValueFunction,
    mdp: &MarkovMdp,
    kernel: &KernelSpec,
    t_grid: &[f64],
    options: &FlowOptions,
) -> Result<ValueTrajectory> {
    check_len(mdp.n_states(), v0.len())?;
    let all: Vec<usize> = (0..mdp.n_states()).collect();
    let k = gram_matrix(kernel, &all, &all, mdp)?;
    let (p, r, g) = (mdp.transition(), mdp.reward(), mdp.discount());
    run(|v| &k * (r + p * v * g - v), v0, t_grid, options)
}

/// ∂_tV(X) = K(X, X_train)[(T^πV − V)(X_train)], with T^πV bootstrapping
/// from the current values on every state, test states included.
pub fn kernel_td_flow_split(
    v0: &ValueFunction,
    mdp: &MarkovMdp,
    kernel: &KernelSpec,
    train_indices: &[usize],
    t_grid: &[f64],
    options: &FlowOptions,
) -> Result<ValueTrajectory> {
    check_len(mdp.n_states(), v0.len())?;
    let train = validate_train(mdp.n_states(), train_indices, false)?;
    let all: Vec<usize> = (0..mdp.n_states()).collect();
    let k_all = gram_matrix(kernel, &all, &train, mdp)?;
    let (p, r, g) = (mdp.transition(), mdp.reward(), mdp.discount());
    run(
        |v| {
            let residual = r + p * v * g - v;
            &k_all * DVector::from_fn(train.len(), |i, _| residual[train[i]])
        },
        v0,
        t_grid,
        options,
    )
}

/// ∂_tV(X) = K(X, X_train)[(V^π − V)(X_train)]; regresses on V^π, never bootstraps.
pub fn kernel_mc_flow(
    v0: &ValueFunction,
    mdp: &MarkovMdp,
    kernel: &KernelSpec,
    train_indices: &[usize],
    t_grid: &[f64],
    options: &FlowOptions,
) -> Result<ValueTrajectory> {
    check_len(mdp.n_states(), v0.len())?;
    let train = validate_train(mdp.n_states(), train_indices, false)?;
    let all: Vec<usize> = (0..mdp.n_states()).collect();
    let k_all = gram_matrix(kernel, &all, &train, mdp)?;
    let v_pi = mdp.value_function()?;
    let target = DVector::from_fn(train.len(), |i, _| v_pi.values()[train[i]]);
    run(|v| &k_all * (&target - DVector::from_fn(train.len(), |i, _| v[train[i]])), v0, t_grid, options)
}

/// Rows `(time, state_index, value, is_train)`.
pub fn flow_csv(trajectory: &ValueTrajectory, train_indices: &[usize]) -> String {
    let mut out = String::from("time,state_index,value,is_train\n");
    for (t, v) in trajectory.times().iter().zip(trajectory.snapshots()) {
        for (i, x) in v.values().iter().enumerate() {
            let _ = writeln!(out, "{},{i},{},{}", fmt_f64(*t), fmt_f64(*x), train_indices.contains(&i));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegressionTarget {
    VPi,
    /// Projection of V^π onto the `count` top eigenvectors.
    SmoothProjection { count: usize },
    /// Projection of V^π onto the `count` bottom eigenvectors.
    RoughProjection { count: usize },
    NStep { n: usize },
}

impl RegressionTarget {
    pub fn label(&self) -> String {
        match self {
            RegressionTarget::VPi => "v_pi".into(),
            RegressionTarget::SmoothProjection { count } => format!("smooth_projection_{count}"),
            RegressionTarget::RoughProjection { count } => format!("rough_projection_{count}"),
            RegressionTarget::NStep { n } => format!("n_step_{n}"),
        }
    }

    /// (regression target, function the held-out error is measured against).
    fn vectors(&self, mdp: &MarkovMdp, decomp: &SpectralDecomposition) -> Result<(DVector<f64>, DVector<f64>)> {
        let v_pi = mdp.value_function()?;
        let n = mdp.n_states();
        let target = match *self {
            RegressionTarget::VPi => v_pi.clone(),
            RegressionTarget::SmoothProjection { count } => {
                project_onto_eigenspace(&v_pi, decomp, &(0..count.min(n)).collect::<Vec<_>>())?
            }
            RegressionTarget::RoughProjection { count } => {
                project_onto_eigenspace(&v_pi, decomp, &(n.saturating_sub(count)..n).collect::<Vec<_>>())?
            }
            RegressionTarget::NStep { n } => n_step_return_target(mdp, NSteps::Finite(n))?,
        };
        let reference = match self {
            RegressionTarget::NStep { .. } => v_pi.into_inner(),
            _ => target.values().clone(),
        };
        Ok((target.into_inner(), reference))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub target: String,
    pub kernel: String,
    pub fraction: f64,
    pub seed: u64,
    pub test_mse: f64,
    pub train_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneralizationCurve {
    pub rows: Vec<CurveRow>,
}

impl GeneralizationCurve {
    /// Seed-averaged test MSE per fraction, in input order.
    pub fn mean_test_mse(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for row in &self.rows {
            match out.iter_mut().find(|(f, _, _)| *f == row.fraction) {
                Some(entry) => {
                    entry.1 += row.test_mse;
                    entry.2 += 1;
                }
                None => out.push((row.fraction, row.test_mse, 1)),
            }
        }
        out.into_iter().map(|(f, s, c)| (f, s / c as f64)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,kernel,fraction,seed,test_mse,train_mse\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.target,
                r.kernel,
                fmt_f64(r.fraction),
                r.seed,
                fmt_f64(r.test_mse),
                fmt_f64(r.train_mse)
            );
        }
        out
    }
}

/// The first ⌊n·fraction⌋ states of a seeded permutation, so subsets grow
/// nested with the fraction for a fixed seed.
pub fn sample_train_states(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("training fraction must lie in (0, 1], got {fraction}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let m = ((n as f64 * fraction).floor() as usize).clamp(1, n);
    perm.truncate(m);
    Ok(perm)
}

/// Ridge-regularized kernel regression on sampled train states.
pub fn kernel_regression_generalization(
    mdp: &MarkovMdp,
    decomp: &SpectralDecomposition,
    kernel: &KernelSpec,
    target: RegressionTarget,
    train_fractions: &[f64],
    seeds: &[u64],
    ridge: f64,
) -> Result<GeneralizationCurve> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Argument(format!("ridge must be nonnegative, got {ridge}")));
    }
    let n = mdp.n_states();
    let (y, reference) = target.vectors(mdp, decomp)?;
    let all: Vec<usize> = (0..n).collect();
    let k = gram_matrix(kernel, &all, &all, mdp)?;
    let mut rows = Vec::with_capacity(train_fractions.len() * seeds.len());
    for &fraction in train_fractions {
        for &seed in seeds {
            let train = sample_train_states(n, fraction, seed)?;
            let test: Vec<usize> = all.iter().copied().filter(|s| !train.contains(s)).collect();
            let ktt = DMatrix::from_fn(train.len(), train.len(), |i, j| k[(train[i], train[j])]);
            let yt = DVector::from_fn(train.len(), |i, _| y[train[i]]);
            let reg = &ktt + DMatrix::identity(train.len(), train.len()) * ridge;
            let weights = match reg.clone().cholesky() {
                Some(ch) => ch.solve(&yt),
                None => linalg::solve(&reg, &yt)?,
            };
            let fit = &ktt * &weights;
            let train_mse = (fit - &yt).norm_squared() / train.len() as f64;
            let test_mse = if test.is_empty() {
                0.0
            } else {
                let kst = DMatrix::from_fn(test.len(), train.len(), |i, j| k[(test[i], train[j])]);
                let pred = kst * &weights;
                test.iter().enumerate().map(|(i, &s)| (pred[i] - reference[s]).powi(2)).sum::<f64>() / test.len() as f64
            };
            rows.push(CurveRow { target: target.label(), kernel: kernel.label(), fraction, seed, test_mse, train_mse });
        }
    }
    Ok(GeneralizationCurve { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightTrajectory {
    pub times: Vec<f64>,
    pub weights: Vec<DVector<f64>>,
    pub diverged_at: Option<f64>,
}

impl WeightTrajectory {
    /// The induced value path Φw_t.
    pub fn values(&self, features: &DMatrix<f64>) -> ValueTrajectory {
        ValueTrajectory::from_parts(self.times.clone(), self.weights.iter().map(|w| features * w).collect(), self.diverged_at)
    }
}

/// ∂_t w = Φ^⊤(R^π + γP^πΦw − Φw).
pub fn linear_feature_flow(
    w0: &DVector<f64>,
    features: &DMatrix<f64>,
    mdp: &MarkovMdp,
    t_grid: &[f64],
    options: &FlowOptions,
) -> Result<WeightTrajectory> {
    check_len(mdp.n_states(), features.nrows())?;
    check_len(features.ncols(), w0.len())?;
    if matches!(options.integrator, Integrator::ClosedForm) {
        return Err(Error::Argument("the feature flow is integrated numerically".into()));
    }
    let rank = features.rank(1e-10 * linalg::spectral_norm(features).max(f64::MIN_POSITIVE));
    if rank < features.ncols() {
        log::warn!("feature matrix has rank {rank} < {} columns; weights are not identifiable", features.ncols());
    }
    let (p, r, g) = (mdp.transition(), mdp.reward(), mdp.discount());
    let phi_t = features.transpose();
    let path = linalg::integrate(
        |w| {
            let v = features * w;
            &phi_t * (r + p * &v * g - &v)
        },
        w0,
        t_grid,
        options.integrator,
        options.cap,
    )?;
    Ok(WeightTrajectory { times: path.times, weights: path.states, diverged_at: path.diverged_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_circle_mdp, build_random_walk_mdp, build_regular_random_walk_mdp, RewardSpec};
    use crate::spectral::eigendecompose;
    use crate::tabular::td_trajectory;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn rbf_diagonal_and_locality_limit() {
        let mdp = build_circle_mdp(20, 0, 0.5).unwrap();
        let k = gram_matrix(&KernelSpec::rbf(1e-6).unwrap(), &all(20), &all(20), &mdp).unwrap();
        for i in 0..20 {
            assert_eq!(k[(i, i)], 1.0);
            for j in 0..20 {
                if i != j {
                    assert!(k[(i, j)] < 1e-300);
                }
            }
        }
    }

    #[test]
    fn rbf_needs_geometry() {
        let mdp = build_random_walk_mdp(5, 0.9, 0, 0.5, &RewardSpec::Zero).unwrap();
        let r = gram_matrix(&KernelSpec::rbf(1.0).unwrap(), &[0], &[1], &mdp);
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(KernelSpec::rbf(0.0).is_err());
    }

    #[test]
    fn full_spectral_kernel_on_symmetric_walk_is_identity() {
        let mdp = build_regular_random_walk_mdp(16, 4, 3, 0.9, &RewardSpec::Gaussian).unwrap();
        let d = eigendecompose(&mdp).unwrap();
        let k = gram_matrix(&KernelSpec::spectral_subset(&d, &all(16)).unwrap(), &all(16), &all(16), &mdp).unwrap();
        assert!((k - DMatrix::identity(16, 16)).amax() < 1e-10);
    }

    #[test]
    fn spectral_kernel_rejects_complex_eigenpairs() {
        let mdp = build_circle_mdp(6, 0, 0.5).unwrap();
        let d = eigendecompose(&mdp).unwrap();
        assert!(KernelSpec::spectral_subset(&d, &[1]).is_err());
    }

    #[test]
    fn identity_kernel_reduces_to_tabular_flow() {
        let mdp = build_random_walk_mdp(10, 0.4, 2, 0.9, &RewardSpec::Gaussian).unwrap();
        let kernel = KernelSpec::DotProduct { features: DMatrix::identity(10, 10) };
        let v0 = ValueFunction::new(randn(10, 1, 1).column(0).into_owned()).unwrap();
        let grid = [0.5, 1.0, 2.0];
        let a = kernel_td_flow_full(&v0, &mdp, &kernel, &grid, &FlowOptions::rk4(1e-3)).unwrap();
        let b = td_trajectory(&v0, &mdp, &grid, Integrator::ClosedForm).unwrap();
        for (x, y) in a.snapshots().iter().zip(b.snapshots()) {
            assert!((x.values() - y.values()).amax() < 1e-9);
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let mdp = build_circle_mdp(12, 3, 0.9).unwrap();
        let v_pi = mdp.value_function().unwrap();
        let kernel = KernelSpec::rbf(2.0).unwrap();
        let train: Vec<usize> = (0..8).collect();
        let td = kernel_td_flow_full(&v_pi, &mdp, &kernel, &[5.0], &FlowOptions::rk4(0.01)).unwrap();
        assert!((td.snapshots()[0].values() - v_pi.values()).amax() < 1e-12);
        let mc = kernel_mc_flow(&v_pi, &mdp, &kernel, &train, &[5.0], &FlowOptions::rk4(0.01)).unwrap();
        assert!((mc.snapshots()[0].values() - v_pi.values()).amax() < 1e-12);
    }

    #[test]
    fn local_kernel_freezes_test_states() {
        let mdp = build_circle_mdp(20, 5, 0.9).unwrap();
        let kernel = KernelSpec::rbf(1e-6).unwrap();
        let train: Vec<usize> = (0..15).collect();
        let v0 = ValueFunction::new(randn(20, 1, 4).column(0).into_owned()).unwrap();
        let tr = kernel_td_flow_split(&v0, &mdp, &kernel, &train, &[1.0, 3.0], &FlowOptions::rk4(0.01)).unwrap();
        for snap in tr.snapshots() {
            for s in 15..20 {
                assert_eq!(snap.values()[s], v0.values()[s]);
            }
        }
    }

    #[test]
    fn split_with_all_states_equals_full_exactly() {
        let mdp = build_circle_mdp(15, 4, 0.9).unwrap();
        let kernel = KernelSpec::rbf(1.5).unwrap();
        let v0 = ValueFunction::new(randn(15, 1, 9).column(0).into_owned()).unwrap();
        let grid = [0.5, 1.0];
        let full = kernel_td_flow_full(&v0, &mdp, &kernel, &grid, &FlowOptions::rk4(0.01)).unwrap();
        let split = kernel_td_flow_split(&v0, &mdp, &kernel, &all(15), &grid, &FlowOptions::rk4(0.01)).unwrap();
        assert_eq!(full, split);
    }

    #[test]
    fn test_state_identity_along_split_flow() {
        let mdp = build_circle_mdp(12, 2, 0.9).unwrap();
        let kernel = KernelSpec::rbf(1.0).unwrap();
        let train: Vec<usize> = (0..8).collect();
        let v0 = ValueFunction::new(randn(12, 1, 2).column(0).into_owned()).unwrap();
        let tr = kernel_td_flow_split(&v0, &mdp, &kernel, &train, &[0.5, 1.0, 2.0], &FlowOptions::rk4(1e-3)).unwrap();
        let op = SplitKernelOperator::new(&kernel, &mdp, &train).unwrap();
        for snap in tr.snapshots() {
            let pred = op.test_state_prediction(&v0, snap).unwrap();
            for (k, &s) in op.test_indices.iter().enumerate() {
                assert!((pred[k] - snap.values()[s]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn split_operator_partitions_states() {
        let mdp = build_circle_mdp(10, 0, 0.5).unwrap();
        let op = SplitKernelOperator::new(&KernelSpec::rbf(1.0).unwrap(), &mdp, &[3, 1, 7]).unwrap();
        assert_eq!(op.test_indices.len() + op.train_indices.len(), 10);
        assert_eq!(op.k_test_train.shape(), (7, 3));
        assert!((&op.k_train_train - op.k_train_train.transpose()).amax() == 0.0);
        assert!(SplitKernelOperator::new(&KernelSpec::rbf(1.0).unwrap(), &mdp, &all(10)).is_err());
        assert!(SplitKernelOperator::new(&KernelSpec::rbf(1.0).unwrap(), &mdp, &[]).is_err());
    }

    #[test]
    fn linear_feature_flow_matches_kernel_flow() {
        let mdp = build_random_walk_mdp(10, 0.4, 6, 0.9, &RewardSpec::Gaussian).unwrap();
        let phi = randn(10, 4, 3) * 0.5;
        let w0 = randn(4, 1, 5).column(0).into_owned();
        let grid = [0.25, 0.5, 1.0];
        let wt = linear_feature_flow(&w0, &phi, &mdp, &grid, &FlowOptions::rk4(1e-3)).unwrap();
        let kernel = KernelSpec::DotProduct { features: phi.clone() };
        let v0 = ValueFunction::new(&phi * &w0).unwrap();
        let kt = kernel_td_flow_full(&v0, &mdp, &kernel, &grid, &FlowOptions::rk4(1e-3)).unwrap();
        for (a, b) in wt.values(&phi).snapshots().iter().zip(kt.snapshots()) {
            assert!((a.values() - b.values()).amax() < 1e-6);
        }
    }

    #[test]
    fn identity_features_recover_tabular_flow() {
        let mdp = build_random_walk_mdp(8, 0.5, 1, 0.8, &RewardSpec::Gaussian).unwrap();
        let w0 = randn(8, 1, 2).column(0).into_owned();
        let wt = linear_feature_flow(&w0, &DMatrix::identity(8, 8), &mdp, &[1.0], &FlowOptions::rk4(1e-3)).unwrap();
        let tab = td_trajectory(&ValueFunction::new(w0).unwrap(), &mdp, &[1.0], Integrator::ClosedForm).unwrap();
        assert!((&wt.weights[0] - tab.snapshots()[0].values()).amax() < 1e-9);
    }

    #[test]
    fn single_feature_confines_values_to_a_line() {
        let mdp = build_random_walk_mdp(8, 0.5, 1, 0.8, &RewardSpec::Gaussian).unwrap();
        let phi = randn(8, 1, 7);
        let w0 = DVector::from_vec(vec![0.3]);
        let wt = linear_feature_flow(&w0, &phi, &mdp, &[0.5, 2.0], &FlowOptions::rk4(1e-3)).unwrap();
        let v0 = &phi * &w0;
        let dir = phi.column(0).normalize();
        for snap in wt.values(&phi).snapshots() {
            let d = snap.values() - &v0;
            let off_line = &d - &dir * dir.dot(&d);
            assert!(off_line.amax() < 1e-12);
        }
    }

    #[test]
    fn full_fraction_regression_fits_span_exactly() {
        let mdp = build_random_walk_mdp(30, 0.2, 4, 0.99, &RewardSpec::Gaussian).unwrap();
        let d = eigendecompose(&mdp).unwrap();
        let kernel = KernelSpec::spectral_subset(&d, &(0..10).collect::<Vec<_>>()).unwrap();
        let curve = kernel_regression_generalization(&mdp, &d, &kernel, RegressionTarget::SmoothProjection { count: 10 }, &[1.0], &[0, 1], 0.0)
            .unwrap();
        for row in &curve.rows {
            assert_eq!(row.test_mse, 0.0);
            assert!(row.train_mse < 1e-8);
        }
    }

    #[test]
    fn train_subsets_are_nested_and_sized() {
        let a = sample_train_states(50, 0.2, 3).unwrap();
        let b = sample_train_states(50, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (10, 25));
        assert!(a.iter().all(|s| b.contains(s)));
        assert!(sample_train_states(50, 0.0, 3).is_err());
        assert_eq!(sample_train_states(50, 0.001, 3).unwrap().len(), 1);
    }

    #[test]
    fn curve_csv_has_row_per_cell() {
        let mdp = build_random_walk_mdp(20, 0.3, 1, 0.9, &RewardSpec::Gaussian).unwrap();
        let d = eigendecompose(&mdp).unwrap();
        let kernel = KernelSpec::spectral_subset(&d, &(0..5).collect::<Vec<_>>()).unwrap();
        let curve = kernel_regression_generalization(&mdp, &d, &kernel, RegressionTarget::NStep { n: 3 }, &[0.2, 0.6], &[1, 2, 3], 1e-8).unwrap();
        assert_eq!(curve.to_csv().lines().count(), 7);
        assert_eq!(curve.mean_test_mse().len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gram_matrices_are_psd(n in 2usize..40, l in 0.01f64..200.0, seed in any::<u64>()) {
            let circle = build_circle_mdp(n, 0, 0.9).unwrap();
            let k = gram_matrix(&KernelSpec::rbf(l).unwrap(), &all(n), &all(n), &circle).unwrap();
            prop_assert!(linalg::min_symmetric_eigenvalue(&k) >= -1e-8);
            let walk = build_random_walk_mdp(n.max(3), 0.5, seed, 0.9, &RewardSpec::Zero).unwrap();
            let d = eigendecompose(&walk).unwrap();
            let m = walk.n_states();
            let ks = gram_matrix(&KernelSpec::spectral_subset(&d, &all(m / 2 + 1)).unwrap(), &all(m), &all(m), &walk).unwrap();
            prop_assert!(linalg::min_symmetric_eigenvalue(&ks) >= -1e-8);
            let phi = randn(m, 3, seed);
            let kd = gram_matrix(&KernelSpec::DotProduct { features: phi }, &all(m), &all(m), &walk).unwrap();
            prop_assert!(linalg::min_symmetric_eigenvalue(&kd) >= -1e-8);
        }
    }
}
