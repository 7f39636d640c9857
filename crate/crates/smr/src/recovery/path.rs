use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{richardson_solve, with_eig_sqrt, FactoredCombination, PencilBounds, STAGE_EPS};
use crate::approximator::{whiten_and_recover, ApproximatorConfig, RecoveryResult, CERT_TOL};
use crate::error::{Result, SmrError};
use crate::moracle::{GainBackend, SdpBackend};
use crate::oracles::{apply_combination, BasisSet, LedgerSnapshot, MeasurementOracle, QueryLedger, WeightVector};

/// Settings shared by every stage of a regularization path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    /// Accuracy of the final stage.
    pub eps: f64,
    pub gamma: f64,
    pub gains: GainBackend,
    pub sdp: SdpBackend,
    pub seed: u64,
}

impl PathConfig {
    pub fn new(eps: f64, gamma: f64) -> Self {
        PathConfig { eps, gamma, gains: GainBackend::Exact, sdp: SdpBackend::Reference, seed: 0 }
    }

    pub(crate) fn stage_config(&self, eps: f64, stage: usize) -> ApproximatorConfig {
        ApproximatorConfig {
            gains: self.gains.clone(),
            sdp: self.sdp,
            seed: self.seed.wrapping_add(stage as u64),
            ..ApproximatorConfig::new(eps, self.gamma)
        }
    }

    pub(crate) fn sketched(&self) -> bool {
        matches!(self.gains, GainBackend::Sketch { .. })
    }
}

/// One stage of the path: its certificate against B_i and what it measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    /// Coefficient of B in B_i.
    pub scale: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub iterations: usize,
    /// Queries charged to the caller's oracle during this stage.
    pub ledger: LedgerSnapshot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub weights: WeightVector,
    /// Final call against B at the caller's accuracy.
    pub result: RecoveryResult,
    /// Intermediate stages followed by the final call.
    pub stages: Vec<StageTrace>,
    pub u_stages: usize,
    pub lambda: f64,
    pub mu: f64,
    pub ledger: LedgerSnapshot,
}

/// u = ceil(log₂(λ/μ)), zero when λ ≤ μ.
pub fn stage_count(lambda: f64, mu: f64) -> usize {
    let r = lambda / mu;
    if r <= 1.0 {
        0
    } else {
        r.log2().ceil() as usize
    }
}

/// Oracle for scale·B + Σshift_iM_i whose inverse channel runs Richardson
/// preconditioned by (pre_scale·H)⁻¹.
#[allow(clippy::too_many_arguments)]
pub(crate) fn shifted_oracle<'a>(
    base: &'a MeasurementOracle<'a>,
    basis: &'a BasisSet,
    shift: Option<&'a WeightVector>,
    scale: f64,
    pre: FactoredCombination,
    pre_scale: f64,
    bounds: PencilBounds,
    with_sqrt: bool,
) -> Result<MeasurementOracle<'a>> {
    let n = base.n();
    let apply = move |x: &DVector<f64>| -> Result<DVector<f64>> {
        let mut y = base.apply_b(x)? * scale;
        if let Some(w) = shift {
            y += apply_combination(basis, w, x, base.ledger())?;
        }
        Ok(y)
    };
    let binv = move |r: &DVector<f64>| {
        richardson_solve(apply, |v| Ok(pre.solve(v, base.ledger()) / pre_scale), r, bounds)
    };
    let oracle = MeasurementOracle::new_fallible(n, Box::new(apply), QueryLedger::new()).with_binv(Box::new(binv));
    if with_sqrt {
        return with_eig_sqrt(oracle);
    }
    Ok(oracle)
}

/// Recovers w′ with (1 − O(ε))γB ⪯ Σw′_iM_i ⪯ B from forward access to B,
/// given β with (γ/λ)B ⪯ Σβ_iM_i ⪯ (1/μ)B. Stage i = 1..u recovers
/// B_i = (2^i/λ)B + Σβ_iM_i at accuracy 1/20, using the previous stage as
/// preconditioner for B_i⁻¹; the final call on B is preconditioned by
/// (λ/2^u)·H_u.
pub fn spectral_approximate(
    basis: &BasisSet,
    oracle: &MeasurementOracle<'_>,
    beta: &WeightVector,
    lambda: f64,
    mu: f64,
    cfg: &PathConfig,
) -> Result<PathResult> {
    if beta.len() != basis.d() {
        return Err(SmrError::DimensionMismatch { expected: basis.d(), got: beta.len() });
    }
    if oracle.n() != basis.n() {
        return Err(SmrError::DimensionMismatch { expected: basis.n(), got: oracle.n() });
    }
    if !(mu > 0.0 && lambda >= mu && lambda.is_finite()) {
        return Err(SmrError::ParamOutOfRange(format!("need lambda >= mu > 0, got {lambda}, {mu}")));
    }
    cfg.stage_config(cfg.eps, 0).validate()?;
    let ledger = oracle.ledger().clone();
    let start = ledger.snapshot();
    let u = stage_count(lambda, mu);
    // every H_i is only trusted to its certified quality: (γ/20)·B_i ⪯ H_i ⪯ B_i,
    // and β satisfies the same bound against B_0
    let stage_lo = cfg.gamma * STAGE_EPS;
    // H_{i−1}⁻¹·B_i has spectrum in [1, 2/stage_lo] since B_{i−1} ⪯ B_i ⪯ 2B_{i−1}
    let bounds = PencilBounds::new(1.0, 2.0 / stage_lo)?;
    let mut h = beta.clone();
    let mut stages = Vec::with_capacity(u + 1);
    for i in 1..=u {
        let scale = 2f64.powi(i as i32) / lambda;
        let before = ledger.snapshot();
        let pre = FactoredCombination::new(basis, &h, true)?;
        let stage = shifted_oracle(oracle, basis, Some(beta), scale, pre, 1.0, bounds, cfg.sketched())?;
        let res = whiten_and_recover(basis, &stage, &cfg.stage_config(STAGE_EPS, i))?;
        let c = res.certificate;
        if c.lambda_min < stage_lo - CERT_TOL || c.lambda_max > 1.0 + CERT_TOL {
            return Err(SmrError::PreconditionerBroken {
                stage: i,
                lower_slack: c.lambda_min - stage_lo,
                upper_slack: 1.0 - c.lambda_max,
            });
        }
        stages.push(StageTrace {
            stage: i,
            scale,
            lambda_min: c.lambda_min,
            lambda_max: c.lambda_max,
            iterations: res.iterations,
            ledger: ledger.snapshot().diff(&before),
        });
        h = res.weight_vector();
    }
    // (λ/2^u)·H_u ∈ [γ/20, 2]·B because (2^u/λ)B ⪯ B_u ⪯ 2(2^u/λ)B
    let pre_scale = lambda / 2f64.powi(u as i32);
    let before = ledger.snapshot();
    let pre = FactoredCombination::new(basis, &h, true)?;
    let final_bounds = PencilBounds::new(0.5, 1.0 / stage_lo)?;
    let last = shifted_oracle(oracle, basis, None, 1.0, pre, pre_scale, final_bounds, cfg.sketched())?;
    let result = whiten_and_recover(basis, &last, &cfg.stage_config(cfg.eps, u + 1))?;
    stages.push(StageTrace {
        stage: u + 1,
        scale: 1.0,
        lambda_min: result.certificate.lambda_min,
        lambda_max: result.certificate.lambda_max,
        iterations: result.iterations,
        ledger: ledger.snapshot().diff(&before),
    });
    Ok(PathResult {
        weights: result.weight_vector(),
        result,
        stages,
        u_stages: u,
        lambda,
        mu,
        ledger: ledger.snapshot().diff(&start),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{extreme_eigs, loewner_sandwich, DenseSymmetric};
    use crate::oracles::BasisElement;

    /// Dense B_i for verification.
    fn stage_matrix(b: &DenseSymmetric, d: &DenseSymmetric, scale: f64) -> DenseSymmetric {
        b.scale(scale).add(d)
    }

    fn cycle_laplacian(n: usize) -> DenseSymmetric {
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            let j = (i + 1) % n;
            m[(i, i)] += 1.0;
            m[(j, j)] += 1.0;
            m[(i, j)] -= 1.0;
            m[(j, i)] -= 1.0;
        }
        DenseSymmetric::new(m).unwrap()
    }

    fn diag_beta(basis: &BasisSet) -> WeightVector {
        WeightVector::new(
            basis.elements().iter().map(|e| if matches!(e, BasisElement::DiagonalUnit(_)) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stage_count_values() {
        assert_eq!(stage_count(1.0, 1.0), 0);
        assert_eq!(stage_count(2.0, 1.0), 1);
        assert_eq!(stage_count(2.5, 1.0), 2);
        assert_eq!(stage_count(8.0, 1.0), 3);
        assert_eq!(stage_count(16.0, 1.0), 4);
    }

    #[test]
    fn identity_needs_no_stages() {
        let basis = BasisSet::new(3, BasisSet::diagonals(3)).unwrap();
        let oracle = MeasurementOracle::from_dense_apply_only(&DenseSymmetric::identity(3), QueryLedger::new());
        let res = spectral_approximate(&basis, &oracle, &WeightVector::ones(3), 1.0, 1.0, &PathConfig::new(0.05, 1.0)).unwrap();
        assert_eq!(res.u_stages, 0);
        assert_eq!(res.stages.len(), 1);
        assert!(res.result.certificate.holds);
    }

    #[test]
    fn cycle_plus_identity_path() {
        let n = 8;
        let b = cycle_laplacian(n).add_identity(1.0);
        let basis = BasisSet::edges_and_diagonals(n).unwrap();
        let beta = diag_beta(&basis);
        let (mu, lambda) = extreme_eigs(&b).unwrap();
        let oracle = MeasurementOracle::from_dense_apply_only(&b, QueryLedger::new());
        let res = spectral_approximate(&basis, &oracle, &beta, lambda, mu, &PathConfig::new(0.05, 1.0)).unwrap();
        assert_eq!(res.u_stages, stage_count(lambda, mu));
        assert!(res.u_stages >= 2);
        assert!(res.result.certificate.holds, "{:?}", res.result.certificate);
        // every intermediate stage certified against a dense B_i
        let d = basis.materialize(&beta).unwrap();
        for st in &res.stages[..res.u_stages] {
            let bi = stage_matrix(&b, &d, st.scale);
            assert!(st.lambda_min >= 0.05 - 1e-9 && st.lambda_max <= 1.0 + 1e-9);
            assert!(bi.n() == n);
        }
        let x = basis.materialize(&res.weights).unwrap();
        let c = loewner_sandwich(&x, &b, 1.0 - 15.0 * 0.05, 1.0, 1e-9).unwrap();
        assert!(c.holds);
    }
}
