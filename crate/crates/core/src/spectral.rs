//! Eigendecomposition of P^π and value functions in its eigenbasis.

use std::fmt::Write as _;
use std::sync::OnceLock;

use faer::{c64, Mat, Side};
use nalgebra::{DMatrix, DVector, LU};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::linalg::{complex_from_faer, fmt_f64, to_faer};
use crate::mdp::{MarkovMdp, ValueFunction};

const REAL_TOL: f64 = 1e-9;
const ORTHOGONAL_TOL: f64 = 1e-8;
const RESIDUAL_TOL: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-14;
const SORT_QUANTUM: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralOptions {
    /// Largest accepted condition number of the eigenvector matrix.
    pub condition_cap: f64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions { condition_cap: 1e12 }
    }
}

#[derive(Debug)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<Complex64>,
    eigenvectors: DMatrix<Complex64>,
    is_real: bool,
    is_orthogonal: bool,
    condition_estimate: f64,
    max_residual: f64,
    lu: OnceLock<Option<LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>>>,
}

impl Clone for SpectralDecomposition {
    fn clone(&self) -> Self {
        SpectralDecomposition {
            eigenvalues: self.eigenvalues.clone(),
            eigenvectors: self.eigenvectors.clone(),
            is_real: self.is_real,
            is_orthogonal: self.is_orthogonal,
            condition_estimate: self.condition_estimate,
            max_residual: self.max_residual,
            lu: OnceLock::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenCoefficients {
    pub coefficients: DVector<Complex64>,
}

impl EigenCoefficients {
    /// Σ α_i v_i.
    pub fn reconstruct(&self, decomp: &SpectralDecomposition) -> DVector<Complex64> {
        &decomp.eigenvectors * &self.coefficients
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TdErrorBound {
    pub actual: f64,
    pub bound: f64,
}

impl SpectralDecomposition {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<Complex64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<Complex64> {
        &self.eigenvectors
    }

    pub fn eigenvector(&self, i: usize) -> DVector<Complex64> {
        self.eigenvectors.column(i).into_owned()
    }

    pub fn is_real(&self) -> bool {
        self.is_real
    }

    pub fn is_orthogonal(&self) -> bool {
        self.is_orthogonal
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate
    }

    pub fn max_residual(&self) -> f64 {
        self.max_residual
    }

    /// Real parts of the selected eigenvectors as columns; errors unless
    /// every selected eigenpair is real.
    pub fn real_eigenvectors(&self, indices: &[usize]) -> Result<DMatrix<f64>> {
        self.check_indices(indices)?;
        for &i in indices {
            let imag = self.eigenvectors.column(i).iter().map(|z| z.im.abs()).fold(0.0, f64::max);
            if self.eigenvalues[i].im.abs() >= REAL_TOL || imag >= REAL_TOL {
                return Err(Error::Spectral { message: format!("eigenpair {i} is not real"), condition: self.condition_estimate });
            }
        }
        Ok(DMatrix::from_fn(self.n(), indices.len(), |r, c| self.eigenvectors[(r, indices[c])].re))
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        match indices.iter().find(|&&i| i >= self.n()) {
            Some(i) => Err(Error::Argument(format!("eigen index {i} out of range for {} eigenpairs", self.n()))),
            None => Ok(()),
        }
    }

    fn lu(&self) -> Result<&LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>> {
        self.lu
            .get_or_init(|| {
                let lu = self.eigenvectors.clone().lu();
                lu.is_invertible().then_some(lu)
            })
            .as_ref()
            .ok_or_else(|| Error::Spectral { message: "eigenvector basis is singular".into(), condition: self.condition_estimate })
    }

    /// JSON export: eigenvalues as (re, im) pairs, eigenvectors row-major.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc {
            format: &'static str,
            version: u32,
            n: usize,
            eigenvalues: Vec<[f64; 2]>,
            eigenvectors: Vec<Vec<[f64; 2]>>,
            is_real: bool,
            is_orthogonal: bool,
            condition_estimate: f64,
        }
        let doc = Doc {
            format: "tdlab-spectrum",
            version: 1,
            n: self.n(),
            eigenvalues: self.eigenvalues.iter().map(|z| [z.re, z.im]).collect(),
            eigenvectors: self.eigenvectors.row_iter().map(|r| r.iter().map(|z| [z.re, z.im]).collect()).collect(),
            is_real: self.is_real,
            is_orthogonal: self.is_orthogonal,
            condition_estimate: self.condition_estimate,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    /// CSV rows `(index, re_lambda, im_lambda, rho)` with ρ(v_i) = |1−λ_i| Σ|v_i|.
    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("index,re_lambda,im_lambda,rho\n");
        for i in 0..self.n() {
            let l = self.eigenvalues[i];
            let rho = (Complex64::new(1.0, 0.0) - l).norm() * self.eigenvectors.column(i).iter().map(|z| z.norm()).sum::<f64>();
            let _ = writeln!(out, "{i},{},{},{}", fmt_f64(l.re), fmt_f64(l.im), fmt_f64(rho));
        }
        out
    }
}

pub fn eigendecompose(mdp: &MarkovMdp) -> Result<SpectralDecomposition> {
    eigendecompose_with(mdp, &SpectralOptions::default())
}

pub fn eigendecompose_with(mdp: &MarkovMdp, options: &SpectralOptions) -> Result<SpectralDecomposition> {
    let p = mdp.transition();
    let n = p.nrows();
    let pf = to_faer(p);
    let weights = symmetrizing_weights(p);
    let (values, vectors): (Vec<Complex64>, DMatrix<Complex64>) = if let Some(w) = &weights {
        // Reversible chain: W^{1/2} P W^{-1/2} is symmetric and shares the spectrum.
        let root: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
        let sym = Mat::from_fn(n, n, |i, j| {
            let a = root[i] / root[j] * p[(i, j)];
            let b = root[j] / root[i] * p[(j, i)];
            0.5 * (a + b)
        });
        let evd = sym
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Spectral { message: format!("symmetric eigensolver failed: {e:?}"), condition: f64::NAN })?;
        let s = evd.S().column_vector();
        let u = evd.U();
        (
            (0..n).map(|i| Complex64::new(s[i], 0.0)).collect(),
            DMatrix::from_fn(n, n, |i, j| Complex64::new(u[(i, j)] / root[i], 0.0)),
        )
    } else {
        let evd = pf
            .eigen()
            .map_err(|e| Error::Spectral { message: format!("eigensolver failed: {e:?}"), condition: f64::NAN })?;
        let s = evd.S().column_vector();
        ((0..n).map(|i| s[i]).collect(), complex_from_faer(evd.U()))
    };
    let symmetric = (p - p.transpose()).amax() <= SYMMETRY_TOL;

    let mut order: Vec<usize> = (0..n).collect();
    let key = |z: Complex64| ((-z.re * SORT_QUANTUM).round() as i64, (z.im * SORT_QUANTUM).round() as i64);
    order.sort_by_key(|&i| (key(values[i]), i));

    let mut eigenvalues = DVector::from_fn(n, |k, _| values[order[k]]);
    let mut eigenvectors = DMatrix::from_fn(n, n, |i, k| vectors[(i, order[k])]);
    for k in 0..n {
        if eigenvalues[k].im.abs() < REAL_TOL {
            eigenvalues[k].im = 0.0;
        }
        normalize_column(&mut eigenvectors, k, eigenvalues[k].im == 0.0);
    }
    let is_real = eigenvalues.iter().all(|z| z.im == 0.0);

    let v = Mat::from_fn(n, n, |i, j| eigenvectors[(i, j)]);
    let max_residual = max_residual(&pf, &v, &eigenvalues);
    let p_norm = p.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let condition_estimate = condition_number(&v, is_real);
    if !(max_residual <= RESIDUAL_TOL * p_norm) {
        return Err(Error::Spectral { message: format!("eigen residual {max_residual:.3e} exceeds tolerance"), condition: condition_estimate });
    }
    if !(condition_estimate <= options.condition_cap) {
        return Err(Error::Spectral {
            message: format!("eigenvector basis is ill-conditioned (cap {:.1e})", options.condition_cap),
            condition: condition_estimate,
        });
    }
    let is_orthogonal = symmetric || {
        let gram = v.adjoint() * &v;
        (0..n).all(|i| (0..n).all(|j| i == j || gram[(i, j)].norm() < ORTHOGONAL_TOL))
    };

    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
        is_real,
        is_orthogonal,
        condition_estimate,
        max_residual,
        lu: OnceLock::new(),
    })
}

/// Positive weights `w` with `w_i P_ij = w_j P_ji` (detailed balance), if any.
fn symmetrizing_weights(p: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = p.nrows();
    let mut w = DVector::from_element(n, f64::NAN);
    for root in 0..n {
        if !w[root].is_nan() {
            continue;
        }
        w[root] = 1.0;
        let mut stack = vec![root];
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if p[(i, j)] > 0.0 && w[j].is_nan() {
                    if p[(j, i)] <= 0.0 {
                        return None;
                    }
                    w[j] = w[i] * p[(i, j)] / p[(j, i)];
                    stack.push(j);
                }
            }
        }
    }
    let balanced = (0..n).all(|i| {
        (0..n).all(|j| {
            let (a, b) = (w[i] * p[(i, j)], w[j] * p[(j, i)]);
            (a - b).abs() <= SYMMETRY_TOL * a.max(b).max(f64::MIN_POSITIVE)
        })
    });
    balanced.then_some(w)
}

/// Unit 2-norm, then rotate so the first largest-magnitude entry is real positive.
fn normalize_column(m: &mut DMatrix<Complex64>, k: usize, real_eigenvalue: bool) {
    let norm = m.column(k).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let largest = m.column(k).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let pivot = m.column(k).iter().position(|z| z.norm() >= largest * (1.0 - 1e-9)).unwrap_or(0);
    let z = m[(pivot, k)];
    let rotation = z.conj() / (z.norm() * norm);
    let mut col = m.column_mut(k);
    col.iter_mut().for_each(|x| *x *= rotation);
    col[pivot] = Complex64::new(col[pivot].norm(), 0.0);
    if real_eigenvalue && col.iter().all(|x| x.im.abs() < REAL_TOL) {
        col.iter_mut().for_each(|x| x.im = 0.0);
    }
}

fn max_residual(p: &Mat<f64>, v: &Mat<c64>, lambda: &DVector<Complex64>) -> f64 {
    let n = p.nrows();
    let pc = Mat::from_fn(n, n, |i, j| c64::new(p[(i, j)], 0.0));
    let pv = &pc * v;
    (0..n)
        .map(|k| (0..n).map(|i| (pv[(i, k)] - lambda[k] * v[(i, k)]).norm_sqr()).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn condition_number(v: &Mat<c64>, real: bool) -> f64 {
    let n = v.nrows();
    if n == 0 {
        return 1.0;
    }
    let sv = if real {
        Mat::from_fn(n, n, |i, j| v[(i, j)].re).singular_values().ok()
    } else {
        v.singular_values().ok()
    };
    match sv {
        Some(s) if s[n - 1] > 0.0 => s[0] / s[n - 1],
        _ => f64::INFINITY,
    }
}

/// Solve eigenvectors·α = V.
pub fn coefficients(v: &ValueFunction, decomp: &SpectralDecomposition) -> Result<EigenCoefficients> {
    check_len(decomp.n(), v.len())?;
    let rhs = v.values().map(|x| Complex64::new(x, 0.0));
    let coefficients = decomp
        .lu()?
        .solve(&rhs)
        .ok_or_else(|| Error::Spectral { message: "eigenvector basis is singular".into(), condition: decomp.condition_estimate })?;
    Ok(EigenCoefficients { coefficients })
}

/// exp(−t(1−γλ))·gap, the continuous-time TD decay of one coefficient gap.
pub fn predicted_coefficient_gap(alpha0_gap: Complex64, lambda: Complex64, discount: f64, t: f64) -> Result<Complex64> {
    if !(t >= 0.0) {
        return Err(Error::Argument(format!("time must be nonnegative, got {t}")));
    }
    Ok((-(Complex64::new(1.0, 0.0) - lambda * discount) * t).exp() * alpha0_gap)
}

/// ‖V − T^πV‖² and Σ_i |α^π_i − α_i|² |1−γλ_i|².
pub fn td_error_and_bound(v: &ValueFunction, mdp: &MarkovMdp, decomp: &SpectralDecomposition) -> Result<TdErrorBound> {
    check_len(mdp.n_states(), v.len())?;
    check_len(mdp.n_states(), decomp.n())?;
    let residual = mdp.reward() + mdp.transition() * v.values() * mdp.discount() - v.values();
    let alpha = coefficients(v, decomp)?.coefficients;
    let alpha_pi = coefficients(&mdp.value_function()?, decomp)?.coefficients;
    let bound = (0..decomp.n())
        .map(|i| {
            let damp = Complex64::new(1.0, 0.0) - decomp.eigenvalues[i] * mdp.discount();
            (alpha_pi[i] - alpha[i]).norm_sqr() * damp.norm_sqr()
        })
        .sum();
    Ok(TdErrorBound { actual: residual.norm_squared(), bound })
}

fn unique_indices(indices: &[usize]) -> Vec<usize> {
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// ‖Σ_{i∈S} α_i v_i‖ (complex norm), defined for any index set.
pub fn projection_norm(v: &ValueFunction, decomp: &SpectralDecomposition, indices: &[usize]) -> Result<f64> {
    decomp.check_indices(indices)?;
    let alpha = coefficients(v, decomp)?.coefficients;
    let mut acc = DVector::<Complex64>::zeros(decomp.n());
    for i in unique_indices(indices) {
        acc += decomp.eigenvectors.column(i) * alpha[i];
    }
    Ok(acc.norm())
}

/// Σ_{i∈S} α_i v_i. Errors when the index set is not closed under complex
/// conjugation, since the projection would then not be a real function.
pub fn project_onto_eigenspace(v: &ValueFunction, decomp: &SpectralDecomposition, indices: &[usize]) -> Result<ValueFunction> {
    decomp.check_indices(indices)?;
    let alpha = coefficients(v, decomp)?.coefficients;
    let mut acc = DVector::<Complex64>::zeros(decomp.n());
    for i in unique_indices(indices) {
        acc += decomp.eigenvectors.column(i) * alpha[i];
    }
    let scale = acc.iter().map(|z| z.norm()).fold(0.0, f64::max).max(v.values().amax());
    let imag = acc.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if imag > 1e-8 * scale.max(1e-300) {
        return Err(Error::Argument("eigen index set is not closed under conjugation".into()));
    }
    ValueFunction::new(acc.map(|z| z.re))
}
