use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::minv::inverse_stages;
use super::{
    richardson_solve, spectrum_bounds, stage_count, with_eig_sqrt, FactoredCombination, PathConfig, PencilBounds,
    StageTrace, STAGE_EPS,
};
use crate::approximator::{whiten_and_recover, ApproximatorConfig, SandwichCertificate, CERT_TOL, OUTPUT_C};
use crate::error::{Result, SmrError};
use crate::iterative::ones_kernel;
use crate::matcore::{loewner_sandwich, pinv, DenseSymmetric};
use crate::oracles::{BasisSet, LedgerSnapshot, MeasurementOracle, QueryLedger, WeightVector};

/// Relative threshold below which an off-diagonal entry is a structural zero.
pub const PATTERN_TOL: f64 = 1e-12;

/// Connected components of the off-diagonal nonzero pattern of `a`, each
/// sorted, ordered by smallest vertex.
pub fn components(a: &DenseSymmetric) -> Vec<Vec<usize>> {
    let n = a.n();
    let thr = PATTERN_TOL * a.max_abs();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            for w in 0..n {
                if !seen[w] && w != v && a.get(v, w).abs() > thr {
                    seen[w] = true;
                    comp.push(w);
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Position of edge (i, j), i < j, in the lexicographic edge list of K_n.
pub(crate) fn edge_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Per-component outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapInvComponent {
    pub vertices: Vec<usize>,
    pub u_stages: usize,
    /// Recovered L′ + α𝟙𝟙ᵀ against (A_c + 𝟙𝟙ᵀ/m)⁻¹; absent for isolated vertices.
    pub certificate: Option<SandwichCertificate>,
    pub alpha_ones: f64,
    pub stage_traces: Vec<StageTrace>,
}

/// Result of the Laplacian-pseudoinverse solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapInvResult {
    pub schema: u32,
    #[serde(skip)]
    pub x: DVector<f64>,
    pub residual: f64,
    /// Weights over the edges of K_n in lexicographic order.
    pub laplacian_weights: Vec<f64>,
    pub components: Vec<LapInvComponent>,
    pub ledger: LedgerSnapshot,
}

impl LapInvResult {
    pub fn laplacian(&self) -> DenseSymmetric {
        let n = self.x.len();
        let basis = BasisSet::new(n, BasisSet::edges(n)).expect("valid edge family");
        basis.materialize(&WeightVector::new(self.laplacian_weights.clone()).expect("nonnegative")).expect("dims")
    }
}

/// One connected component with m ≥ 2 vertices, A_c = L_c†. Targets
/// N_i = (s_i·A_c + I)⁻¹ = A_i† + 𝟙𝟙ᵀ/m are Laplacian plus a multiple of
/// 𝟙𝟙ᵀ, so the inverse path over edges ∪ {𝟙𝟙ᵀ} applies with γ = 1. The final
/// target is (A_c + 𝟙𝟙ᵀ/m)⁻¹ = L_c + 𝟙𝟙ᵀ/m.
fn solve_component(
    a_c: &DenseSymmetric,
    b_c: &DVector<f64>,
    cfg: &PathConfig,
    ledger: &std::sync::Arc<QueryLedger>,
) -> Result<(DVector<f64>, WeightVector, LapInvComponent)> {
    let m = a_c.n();
    let oracle = MeasurementOracle::from_dense_apply_only(a_c, ledger.clone());
    let apply_a = |v: &DVector<f64>| oracle.apply_b(v);
    let (lmin, lmax) = spectrum_bounds(a_c, Some(&ones_kernel(m)), cfg.seed)?;
    let u = stage_count(lmax, lmin);
    let basis = BasisSet::edges_and_ones(m)?;
    let inv_m = 1.0 / m as f64;
    // (A/λ_max + I)⁻¹ ∈ [1/2, 1]·I and I = (L_{K_m} + 𝟙𝟙ᵀ)/m
    let h0 = WeightVector::new(vec![0.5 * inv_m; basis.d()])?;
    let (h_u, mut traces) = inverse_stages(&basis, &apply_a, h0, lmax, u, cfg, ledger)?;
    let s_u = 2f64.powi(u as i32) / lmax;
    let before = ledger.snapshot();
    let pre = FactoredCombination::new(&basis, &h_u, false)?;
    let project = |x: &DVector<f64>| x.add_scalar(-x.mean());
    // on 𝟙⊥ s_u·H_u ∈ [1/40, 1]·L_c; on 𝟙 the preconditioner is exact
    let precond = |r: &DVector<f64>| {
        let mut y = project(&pre.apply(&project(r), ledger)) * s_u;
        y.add_scalar_mut(r.mean());
        Ok(y)
    };
    let apply_t = move |v: &DVector<f64>| Ok(apply_a(v)?.add_scalar(v.sum() * inv_m));
    let bounds = PencilBounds::new(STAGE_EPS / 2.0, 1.0)?;
    let fwd = move |v: &DVector<f64>| richardson_solve(apply_t, precond, v, bounds);
    let mut last = MeasurementOracle::new_fallible(m, Box::new(fwd), QueryLedger::new()).with_binv(Box::new(apply_t));
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
    let c = res.certificate;
    let hm = FactoredCombination::new(&basis, &h, false)?;
    let solve_bounds = PencilBounds::new(c.lambda_min, c.lambda_max)?;
    // b_c ⊥ 𝟙, so the solution of (A_c + 𝟙𝟙ᵀ/m)x = b_c solves A_c·x = b_c
    let x = richardson_solve(apply_t, |r| Ok(hm.apply(r, ledger)), b_c, solve_bounds)?;
    let alpha = h.as_slice()[basis.d() - 1];
    let report = LapInvComponent {
        vertices: Vec::new(),
        u_stages: u,
        certificate: Some(c),
        alpha_ones: alpha,
        stage_traces: traces,
    };
    Ok((x, h, report))
}

/// Solves Ax = b for A = L† with L an unknown graph Laplacian, component by
/// component, and returns the recovered Laplacian L′.
pub fn lap_pinv_solve(a: &DenseSymmetric, b: &DVector<f64>, cfg: &PathConfig) -> Result<LapInvResult> {
    let n = a.n();
    if b.len() != n {
        return Err(SmrError::DimensionMismatch { expected: n, got: b.len() });
    }
    if n == 0 {
        return Err(SmrError::ParamOutOfRange("empty matrix".into()));
    }
    let ledger = QueryLedger::new();
    let scale = b.norm().max(f64::MIN_POSITIVE);
    let mut x = DVector::zeros(n);
    let mut weights = vec![0.0; n * (n - 1) / 2];
    let mut reports = Vec::new();
    for (ci, comp) in components(a).into_iter().enumerate() {
        let m = comp.len();
        let b_c = DVector::from_iterator(m, comp.iter().map(|&v| b[v]));
        let tol = 1e-8 * scale;
        if b_c.sum().abs() / (m as f64).sqrt() > tol {
            return Err(SmrError::ComponentInconsistent { component: ci });
        }
        if m == 1 {
            // isolated vertex: the row of A is zero
            if a.get(comp[0], comp[0]).abs() > PATTERN_TOL * a.max_abs().max(f64::MIN_POSITIVE) {
                return Err(SmrError::ValidationFailed(format!(
                    "vertex {} is isolated but has nonzero diagonal",
                    comp[0]
                )));
            }
            reports.push(LapInvComponent {
                vertices: comp,
                u_stages: 0,
                certificate: None,
                alpha_ones: 0.0,
                stage_traces: Vec::new(),
            });
            continue;
        }
        let mut sub = DMatrix::zeros(m, m);
        for (p, &vp) in comp.iter().enumerate() {
            for (q, &vq) in comp.iter().enumerate() {
                sub[(p, q)] = a.get(vp, vq);
            }
        }
        let a_c = DenseSymmetric::new(sub)?;
        let (x_c, h, mut report) = solve_component(&a_c, &b_c, cfg, &ledger)?;
        for (p, &vp) in comp.iter().enumerate() {
            x[vp] = x_c[p];
        }
        let mut k = 0;
        for p in 0..m {
            for q in (p + 1)..m {
                weights[edge_index(n, comp[p], comp[q])] = h.as_slice()[k];
                k += 1;
            }
        }
        report.vertices = comp;
        reports.push(report);
    }
    let bn = b.norm();
    let r = (a.mul_vec(&x) - b).norm();
    let residual = if bn == 0.0 { r } else { r / bn };
    Ok(LapInvResult {
        schema: 1,
        x,
        residual,
        laplacian_weights: weights,
        components: reports,
        ledger: ledger.snapshot(),
    })
}

/// Certifies a recovered L′ against L = A† on range(A):
/// (1 − c·ε)·L ⪯ L′ ⪯ L.
pub fn lap_pinv_certificate(a: &DenseSymmetric, recovered: &DenseSymmetric, eps: f64) -> Result<SandwichCertificate> {
    let l = pinv(a)?;
    let lo = 1.0 - OUTPUT_C * eps;
    let c = loewner_sandwich(recovered, &l, lo, 1.0, CERT_TOL)?;
    Ok(SandwichCertificate::from_loewner(lo, 1.0, &c))
}
