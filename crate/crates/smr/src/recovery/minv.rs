use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{
    richardson_solve, spectrum_bounds, stage_count, with_eig_sqrt, FactoredCombination, PathConfig, PencilBounds,
    StageTrace, STAGE_EPS,
};
use crate::approximator::{whiten_and_recover, ApproximatorConfig, RecoveryResult, SandwichCertificate, CERT_TOL};
use crate::error::{Result, SmrError};
use crate::matcore::DenseSymmetric;
use crate::oracles::{BasisSet, LedgerSnapshot, MeasurementOracle, QueryLedger, WeightVector};

pub(crate) type SharedMap<'a> = &'a (dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync);

/// Runs `oracle` through the recovery and checks the stage certificate.
pub(crate) fn certified_stage(
    basis: &BasisSet,
    oracle: &MeasurementOracle<'_>,
    cfg: &ApproximatorConfig,
    stage: usize,
) -> Result<RecoveryResult> {
    let res = whiten_and_recover(basis, oracle, cfg)?;
    let c = res.certificate;
    let lo = cfg.gamma * STAGE_EPS;
    if c.lambda_min < lo - CERT_TOL || c.lambda_max > 1.0 + CERT_TOL {
        return Err(SmrError::PreconditionerBroken {
            stage,
            lower_slack: c.lambda_min - lo,
            upper_slack: 1.0 - c.lambda_max,
        });
    }
    Ok(res)
}

/// Stages i = 1..u recovering H_i ≈ (s_i·B + I)⁻¹, s_i = 2^i/λ_max(B), from
/// H_0 (a certified approximation of (s_0·B + I)⁻¹). Forward products with the
/// target are Richardson solves with B_i preconditioned by H_{i−1}; the inverse
/// channel is B_i itself. Every target is an exact nonnegative combination
/// of the basis, so each stage runs with γ = 1.
pub(crate) fn inverse_stages(
    basis: &BasisSet,
    apply_b: SharedMap<'_>,
    h0: WeightVector,
    lambda_max: f64,
    u: usize,
    cfg: &PathConfig,
    ledger: &QueryLedger,
) -> Result<(WeightVector, Vec<StageTrace>)> {
    let n = basis.n();
    let mut h = h0;
    let mut traces = Vec::with_capacity(u);
    // H_{i−1} ∈ [1/20, 1]·N_{i−1} and N_{i−1} ∈ [1, 2]·N_i
    let bounds = PencilBounds::new(STAGE_EPS, 2.0)?;
    for i in 1..=u {
        let s = 2f64.powi(i as i32) / lambda_max;
        let before = ledger.snapshot();
        let pre = FactoredCombination::new(basis, &h, false)?;
        let fwd = move |v: &DVector<f64>| {
            richardson_solve(|y| Ok(apply_b(y)? * s + y), |r| Ok(pre.apply(r, ledger)), v, bounds)
        };
        let inv = move |v: &DVector<f64>| Ok(apply_b(v)? * s + v);
        let mut oracle = MeasurementOracle::new_fallible(n, Box::new(fwd), QueryLedger::new()).with_binv(Box::new(inv));
        if cfg.sketched() {
            oracle = with_eig_sqrt(oracle)?;
        }
        let scfg = ApproximatorConfig { gamma: 1.0, ..cfg.stage_config(STAGE_EPS, i) };
        let res = certified_stage(basis, &oracle, &scfg, i)?;
        traces.push(StageTrace {
            stage: i,
            scale: s,
            lambda_min: res.certificate.lambda_min,
            lambda_max: res.certificate.lambda_max,
            iterations: res.iterations,
            ledger: ledger.snapshot().diff(&before),
        });
        h = res.weight_vector();
    }
    Ok((h, traces))
}

/// Result of the inverse-M-matrix solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MInvResult {
    pub schema: u32,
    #[serde(skip)]
    pub x: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// Weights over edges ∪ diagonals of H ≈ XMX, X = diag(A𝟙).
    pub weights: Vec<f64>,
    pub x_scale: Vec<f64>,
    /// H against XMX (equivalently X⁻¹HX⁻¹ against M).
    pub certificate: SandwichCertificate,
    pub u_stages: usize,
    pub stage_traces: Vec<StageTrace>,
    pub ledger: LedgerSnapshot,
}

impl MInvResult {
    /// X⁻¹HX⁻¹, the recovered approximation of M = A⁻¹.
    pub fn m_approx(&self) -> DenseSymmetric {
        let n = self.x_scale.len();
        let basis = BasisSet::edges_and_diagonals(n).expect("n >= 1");
        let h = basis.materialize(&WeightVector::new(self.weights.clone()).expect("nonnegative")).expect("dims");
        let xinv = nalgebra::DMatrix::from_diagonal(&DVector::from_iterator(n, self.x_scale.iter().map(|v| 1.0 / v)));
        h.congruence(&xinv)
    }
}

/// Solves Ax = b for A = M⁻¹ with M an (unknown) invertible symmetric
/// M-matrix, using products with A only. With x = A𝟙 and X = diag(x),
/// B = X⁻¹AX⁻¹ is the inverse of the SDDM matrix XMX; the regularization path
/// recovers H ≈ XMX over edges ∪ diagonals and X⁻¹HX⁻¹ preconditions A.
pub fn mmatrix_inv_solve(a: &DenseSymmetric, b: &DVector<f64>, cfg: &PathConfig) -> Result<MInvResult> {
    let n = a.n();
    if b.len() != n {
        return Err(SmrError::DimensionMismatch { expected: n, got: b.len() });
    }
    let ledger = QueryLedger::new();
    let oracle = MeasurementOracle::from_dense_apply_only(a, ledger.clone());
    let x_scale = oracle.apply_b(&DVector::from_element(n, 1.0))?;
    if let Some(i) = x_scale.iter().position(|&v| !(v > 0.0)) {
        return Err(SmrError::NotInverseM(format!("A·1 has nonpositive entry {} at index {i}", x_scale[i])));
    }
    let xinv = x_scale.map(|v| 1.0 / v);
    let apply_b = |v: &DVector<f64>| -> Result<DVector<f64>> { Ok(oracle.apply_b(&v.component_mul(&xinv))?.component_mul(&xinv)) };
    let b_dense = DenseSymmetric::new(
        nalgebra::DMatrix::from_diagonal(&xinv) * a.matrix() * nalgebra::DMatrix::from_diagonal(&xinv),
    )?;
    let (lmin, lmax) = spectrum_bounds(&b_dense, None, cfg.seed)?;
    let u = stage_count(lmax, lmin);
    let basis = BasisSet::edges_and_diagonals(n)?;
    // (B/λ_max + I)⁻¹ ∈ [1/2, 1]·I, so H_0 = I/2 is a valid start
    let h0 = WeightVector::new(
        basis.elements().iter().map(|e| if matches!(e, crate::oracles::BasisElement::DiagonalUnit(_)) { 0.5 } else { 0.0 }).collect(),
    )?;
    let (h_u, mut traces) = inverse_stages(&basis, &apply_b, h0, lmax, u, cfg, &ledger)?;
    // s_u·H_u ∈ [1/40, 1]·B⁻¹ since s_u·B ⪯ s_u·B + I ⪯ 2s_u·B
    let s_u = 2f64.powi(u as i32) / lmax;
    let before = ledger.snapshot();
    let pre = FactoredCombination::new(&basis, &h_u, false)?;
    let bounds = PencilBounds::new(STAGE_EPS / 2.0, 1.0)?;
    let fwd = |v: &DVector<f64>| richardson_solve(apply_b, |r| Ok(pre.apply(r, &ledger) * s_u), v, bounds);
    let mut last = MeasurementOracle::new_fallible(n, Box::new(fwd), QueryLedger::new()).with_binv(Box::new(apply_b));
    if cfg.sketched() {
        last = with_eig_sqrt(last)?;
    }
    let fcfg = ApproximatorConfig { gamma: 1.0, ..cfg.stage_config(cfg.eps, u + 1) };
    let res = whiten_and_recover(&basis, &last, &fcfg)?;
    traces.push(StageTrace {
        stage: u + 1,
        scale: 1.0,
        lambda_min: res.certificate.lambda_min,
        lambda_max: res.certificate.lambda_max,
        iterations: res.iterations,
        ledger: ledger.snapshot().diff(&before),
    });
    let h = res.weight_vector();
    let hm = FactoredCombination::new(&basis, &h, false)?;
    // X⁻¹HX⁻¹·A has the spectrum of the pencil (H, XMX)
    let c = res.certificate;
    let solve_bounds = PencilBounds::new(c.lambda_min, c.lambda_max)?;
    let precond = |r: &DVector<f64>| Ok(hm.apply(&r.component_mul(&xinv), &ledger).component_mul(&xinv));
    let x = richardson_solve(|y| oracle.apply_b(y), precond, b, solve_bounds)?;
    let bn = b.norm();
    let residual = if bn == 0.0 { 0.0 } else { (a.mul_vec(&x) - b).norm() / bn };
    Ok(MInvResult {
        schema: 1,
        x,
        residual,
        iterations: 0,
        weights: h.as_slice().to_vec(),
        x_scale: x_scale.iter().copied().collect(),
        certificate: c,
        u_stages: u,
        stage_traces: traces,
        ledger: ledger.snapshot(),
    })
}
