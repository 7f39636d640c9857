use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{richardson_solve, spectrum_bounds, FactoredCombination, PathConfig, PencilBounds, StageTrace, STAGE_EPS, SOLVE_TARGET};
use super::path::spectral_approximate;
use crate::approximator::{SandwichCertificate, CERT_TOL, OUTPUT_C};
use crate::error::{Result, SmrError};
use crate::iterative::{consistent_singular_solve, detect_kernel, ones_kernel};
use crate::matcore::{loewner_sandwich, DenseSymmetric};
use crate::oracles::{BasisElement, BasisSet, LedgerSnapshot, MeasurementOracle, QueryLedger, WeightVector};

/// Outcome of an end-to-end solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub schema: u32,
    #[serde(skip)]
    pub x: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// Recovered preconditioner against the matrix it approximates.
    pub certificate: SandwichCertificate,
    pub stage_traces: Vec<StageTrace>,
    pub ledger: LedgerSnapshot,
}

fn residual(a: &DenseSymmetric, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let bn = b.norm();
    if bn == 0.0 {
        return (a.mul_vec(x)).norm();
    }
    (a.mul_vec(x) - b).norm() / bn
}

/// Solves Ax = b for A with an unknown Laplacian L, γA ⪯ L ⪯ A. Recovers an
/// SDD preconditioner for C = A + λ_min·I over edges ∪ diagonals at accuracy
/// 1/20 and runs preconditioned Richardson on A with C as preconditioner.
pub fn perturbed_laplacian_solve(a: &DenseSymmetric, gamma: f64, b: &DVector<f64>, cfg: &PathConfig) -> Result<SolveReport> {
    let n = a.n();
    if b.len() != n {
        return Err(SmrError::DimensionMismatch { expected: n, got: b.len() });
    }
    let kernel = detect_kernel(a)?;
    let bn = b.norm();
    if bn > 0.0 && kernel.ncols() > 0 {
        let comp = (kernel.transpose() * b).norm() / bn;
        if comp > 1e-8 {
            return Err(SmrError::Inconsistent { component: comp, tol: 1e-8 });
        }
    }
    let (lmin, lmax) = spectrum_bounds(a, Some(&kernel), cfg.seed)?;
    let c = a.add_identity(lmin);
    let ledger = QueryLedger::new();
    let oracle = MeasurementOracle::from_dense_apply_only(&c, ledger.clone());
    let basis = BasisSet::edges_and_diagonals(n)?;
    let beta = WeightVector::new(
        basis.elements().iter().map(|e| if matches!(e, BasisElement::DiagonalUnit(_)) { 1.0 } else { 0.0 }).collect(),
    )?;
    let stage_cfg = PathConfig { eps: STAGE_EPS, gamma, ..cfg.clone() };
    // C has spectrum in [λ_min, λ_max + λ_min]
    let path = spectral_approximate(&basis, &oracle, &beta, lmax + lmin, lmin, &stage_cfg)?;
    let h = FactoredCombination::new(&basis, &path.weights, true)?;
    let cert = path.result.certificate;
    // H⁻¹C has spectrum in [1/λ_max(H,C), 1/λ_min(H,C)]
    let bounds = PencilBounds::new(1.0 / cert.lambda_max.max(1e-300), 1.0 / cert.lambda_min.max(1e-300))?;
    let solve_c = |r: &DVector<f64>| richardson_solve(|y| Ok(c.mul_vec(y)), |v| Ok(h.solve(v, &ledger)), r, bounds);
    let out = consistent_singular_solve(|y| Ok(a.mul_vec(y)), solve_c, b, SOLVE_TARGET, Some(&kernel))?;
    Ok(SolveReport {
        schema: 1,
        residual: residual(a, &out.x, b),
        iterations: out.iters,
        x: out.x,
        certificate: cert,
        stage_traces: path.stages,
        ledger: ledger.snapshot(),
    })
}

/// Laplacian recovered from a perturbed Laplacian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedRecovery {
    pub schema: u32,
    /// Weights over the edges of K_n in lexicographic order.
    pub laplacian_weights: Vec<f64>,
    /// Weight of 𝟙𝟙ᵀ removed from the recovered combination.
    pub alpha_ones: f64,
    /// L′ against A on the complement of 𝟙.
    pub certificate: SandwichCertificate,
    pub stage_traces: Vec<StageTrace>,
    pub ledger: LedgerSnapshot,
}

impl PerturbedRecovery {
    pub fn laplacian(&self, n: usize) -> DenseSymmetric {
        let basis = BasisSet::new(n, BasisSet::edges(n)).expect("valid edge family");
        basis.materialize(&WeightVector::new(self.laplacian_weights.clone()).expect("nonnegative")).expect("dims")
    }
}

/// Recovers L′ with (1 − O(ε))γA ⪯ L′ ⪯ A on 𝟙⊥ from A with a connected
/// witness Laplacian. Works against C = A + 𝟙𝟙ᵀ/n over edges ∪ {𝟙𝟙ᵀ}.
pub fn perturbed_laplacian_recover(a: &DenseSymmetric, gamma: f64, cfg: &PathConfig) -> Result<PerturbedRecovery> {
    let n = a.n();
    if n < 2 {
        return Err(SmrError::ParamOutOfRange("need at least two vertices".into()));
    }
    let ones = ones_kernel(n);
    let ones_dir = &ones.column(0);
    if a.mul_vec(&ones_dir.clone_owned()).norm() > 1e-9 * a.max_abs().max(1.0) {
        return Err(SmrError::KernelMismatch { residual: a.mul_vec(&ones_dir.clone_owned()).norm() });
    }
    let (lmin, lmax) = spectrum_bounds(a, Some(&ones), cfg.seed)?;
    let j = DMatrix::from_element(n, n, 1.0 / n as f64);
    let c = DenseSymmetric::new(a.matrix() + j)?;
    let ledger = QueryLedger::new();
    let oracle = MeasurementOracle::from_dense_apply_only(&c, ledger.clone());
    let basis = BasisSet::edges_and_ones(n)?;
    // (1/n)·(L_{K_n} + 𝟙𝟙ᵀ) = I
    let beta = WeightVector::new(vec![1.0 / n as f64; basis.d()])?;
    // C has spectrum in [min(λ_min, 1), max(λ_max, 1)]
    let mu = lmin.min(1.0);
    let lambda = lmax.max(1.0);
    let path = spectral_approximate(&basis, &oracle, &beta, lambda, mu, cfg)?;
    let w = path.weights.as_slice();
    let edges = w[..basis.d() - 1].to_vec();
    let alpha = w[basis.d() - 1];
    let lap = BasisSet::new(n, BasisSet::edges(n))?.materialize(&WeightVector::new(edges.clone())?)?;
    let lo = (1.0 - OUTPUT_C * cfg.eps) * gamma;
    let cert = loewner_sandwich(&lap, a, lo, 1.0, CERT_TOL)?;
    Ok(PerturbedRecovery {
        schema: 1,
        laplacian_weights: edges,
        alpha_ones: alpha,
        certificate: SandwichCertificate::from_loewner(lo, 1.0, &cert),
        stage_traces: path.stages,
        ledger: ledger.snapshot(),
    })
}
