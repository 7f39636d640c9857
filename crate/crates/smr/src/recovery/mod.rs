//! Solvers built on recovery: the regularization path, perturbed Laplacians,
//! inverse M-matrices, Laplacian pseudoinverses and the M-matrix toolkit.

mod lapinv;
mod minv;
mod path;
mod perturbed;
mod structure;

pub use lapinv::{components, lap_pinv_certificate, lap_pinv_solve, LapInvComponent, LapInvResult, PATTERN_TOL};
pub use minv::{mmatrix_inv_solve, MInvResult};
pub use path::{spectral_approximate, stage_count, PathConfig, PathResult, StageTrace};
pub use perturbed::{perturbed_laplacian_recover, perturbed_laplacian_solve, PerturbedRecovery, SolveReport};
pub use structure::{mmatrix_structure_checks, SddMeasure, ShiftCheck, StructureReport, STRUCTURE_ALPHAS, STRUCTURE_TOL};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SmrError};
use crate::iterative::{precond_richardson, richardson_iteration_bound, RichardsonConfig, INNER_TOL};
use crate::matcore::{eigh, DenseSymmetric};
use crate::oracles::{random_vector, BasisSet, Channel, MeasurementOracle, QueryLedger, WeightVector};

/// Accuracy of every intermediate stage.
pub const STAGE_EPS: f64 = 1.0 / 20.0;
/// Power-iteration steps for extreme eigenvalue estimates.
pub const POWER_STEPS: usize = 200;
/// End-to-end residual target of the solvers.
pub const SOLVE_TARGET: f64 = 1e-10;

/// Spectrum range [lo, hi] of P·T for a preconditioner P of a target T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PencilBounds {
    /// Smallest eigenvalue of P·T.
    pub lo: f64,
    /// Largest eigenvalue of P·T.
    pub hi: f64,
}

impl PencilBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(SmrError::ParamOutOfRange(format!("pencil bounds [{lo}, {hi}] invalid")));
        }
        Ok(PencilBounds { lo, hi })
    }

    /// 2/(lo + hi).
    pub fn eta(&self) -> f64 {
        2.0 / (self.lo + self.hi)
    }

    /// (κ − 1)/(κ + 1).
    pub fn contraction(&self) -> f64 {
        (self.hi - self.lo) / (self.hi + self.lo)
    }

    fn budget(&self) -> usize {
        let c = self.contraction().max(1e-3);
        4 * richardson_iteration_bound(1.0 / (1.0 - c), 1.0, INNER_TOL) + 50
    }
}

/// A recovered combination Σh_iM_i in factored form. Applications record one
/// MV query, solves one solve query.
pub(crate) struct FactoredCombination {
    dense: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl FactoredCombination {
    pub(crate) fn new(basis: &BasisSet, h: &WeightVector, factor: bool) -> Result<Self> {
        let dense = basis.materialize(h)?.into_matrix();
        let chol = if factor {
            Some(Cholesky::new(dense.clone()).ok_or_else(|| {
                SmrError::RecoveryFailed("recovered preconditioner is not positive definite".into())
            })?)
        } else {
            None
        };
        Ok(FactoredCombination { dense, chol })
    }

    pub(crate) fn apply(&self, x: &DVector<f64>, ledger: &QueryLedger) -> DVector<f64> {
        ledger.record(Channel::Mv);
        &self.dense * x
    }

    pub(crate) fn solve(&self, x: &DVector<f64>, ledger: &QueryLedger) -> DVector<f64> {
        ledger.record(Channel::Solve);
        self.chol.as_ref().expect("factored on construction").solve(x)
    }
}

/// Solves T·y = r by preconditioned Richardson to the inner tolerance, where
/// `apply_t` multiplies by T and `precond` approximates T⁻¹ within `bounds`.
pub(crate) fn richardson_solve<A, P>(apply_t: A, precond: P, r: &DVector<f64>, bounds: PencilBounds) -> Result<DVector<f64>>
where
    A: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    P: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let cfg = RichardsonConfig::new(bounds.eta(), bounds.budget(), INNER_TOL)?;
    let out = precond_richardson(apply_t, precond, r, &cfg)?;
    if !out.converged {
        return Err(SmrError::NonConvergence { iterations: out.iters });
    }
    Ok(out.x)
}

/// Adds a factor channel C = B^{1/2} formed from n forward queries (eig
/// backend of the sketch).
pub(crate) fn with_eig_sqrt(oracle: MeasurementOracle<'_>) -> Result<MeasurementOracle<'_>> {
    let dense = oracle.materialize_b()?;
    let dec = eigh(&dense)?;
    if dec.lambda_min() <= 0.0 {
        return Err(SmrError::SingularB);
    }
    let root = dec.compose(&dec.eigenvalues.map(f64::sqrt)).into_matrix();
    Ok(oracle.with_sqrt(Box::new(move |x| Ok(&root * x))))
}

fn project_off(x: &mut DVector<f64>, kernel: Option<&DMatrix<f64>>) {
    if let Some(k) = kernel {
        if k.ncols() > 0 {
            let c = k.transpose() * &*x;
            *x -= k * c;
        }
    }
}

/// λ_max by power iteration, restricted to the complement of `kernel`.
/// The estimate is a lower bound; callers add their own margin.
pub fn power_lambda_max<A>(mut apply: A, n: usize, kernel: Option<&DMatrix<f64>>, steps: usize, seed: u64) -> Result<f64>
where
    A: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = random_vector(n, &mut rng);
    project_off(&mut v, kernel);
    let nv = v.norm();
    if nv == 0.0 {
        return Err(SmrError::ZeroMatrix);
    }
    v /= nv;
    let mut est = 0.0;
    for _ in 0..steps {
        let mut w = apply(&v)?;
        project_off(&mut w, kernel);
        est = v.dot(&w);
        let nw = w.norm();
        if nw == 0.0 {
            return Err(SmrError::ZeroMatrix);
        }
        v = w / nw;
    }
    Ok(est)
}

/// Smallest eigenvalue on the complement of `kernel` by inverse power
/// iteration with a dense Cholesky factor of A + λ_max·P_kernel.
pub fn inverse_power_lambda_min(a: &DenseSymmetric, kernel: Option<&DMatrix<f64>>, steps: usize, seed: u64) -> Result<f64> {
    let n = a.n();
    let lmax = power_lambda_max(|x| Ok(a.mul_vec(x)), n, kernel, steps, seed)?;
    let mut shifted = a.matrix().clone();
    if let Some(k) = kernel {
        shifted += k * k.transpose() * lmax;
    }
    let chol = Cholesky::new(shifted).ok_or(SmrError::Singular { lambda_min: 0.0 })?;
    let inv_max = power_lambda_max(|x| Ok(chol.solve(x)), n, kernel, steps, seed.wrapping_add(1))?;
    if !(inv_max > 0.0) {
        return Err(SmrError::Singular { lambda_min: 0.0 });
    }
    Ok(1.0 / inv_max)
}

/// (λ_min, λ_max) on the complement of `kernel` with 1% safety margins.
pub fn spectrum_bounds(a: &DenseSymmetric, kernel: Option<&DMatrix<f64>>, seed: u64) -> Result<(f64, f64)> {
    let lmax = power_lambda_max(|x| Ok(a.mul_vec(x)), a.n(), kernel, POWER_STEPS, seed)?;
    let lmin = inverse_power_lambda_min(a, kernel, POWER_STEPS, seed)?;
    Ok((lmin * 0.99, lmax * 1.01))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iterative::ones_kernel;

    #[test]
    fn power_iteration_matches_eigh() {
        let a = DenseSymmetric::from_row_slice(3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]).unwrap();
        let dec = eigh(&a).unwrap();
        let lmax = power_lambda_max(|x| Ok(a.mul_vec(x)), 3, None, POWER_STEPS, 1).unwrap();
        assert!((lmax - dec.lambda_max()).abs() <= 1e-3 * dec.lambda_max());
        let lmin = inverse_power_lambda_min(&a, None, POWER_STEPS, 1).unwrap();
        assert!((lmin - dec.lambda_min()).abs() <= 1e-3 * dec.lambda_min());
    }

    #[test]
    fn restricted_power_iteration_on_laplacian() {
        // path on 3 vertices: nonzero eigenvalues 1 and 3
        let l = DenseSymmetric::from_row_slice(3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]).unwrap();
        let k = ones_kernel(3);
        let (lo, hi) = spectrum_bounds(&l, Some(&k), 4).unwrap();
        assert!((0.98..=1.0).contains(&lo), "{lo}");
        assert!((3.0..=3.04).contains(&hi), "{hi}");
    }

    #[test]
    fn pencil_step() {
        let p = PencilBounds::new(0.5, 1.5).unwrap();
        assert_eq!(p.eta(), 1.0);
        assert!((p.contraction() - 0.5).abs() < 1e-15);
        assert!(PencilBounds::new(0.0, 1.0).is_err());
    }
}
