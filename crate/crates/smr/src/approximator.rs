//! The two-sided barrier approximator for the identity case and its whitened
//! form for a general PD B.

use serde::{Deserialize, Serialize};

use crate::barrier::{
    advance_barriers, check_eps, check_floors, check_gamma, log_barrier_scale, lower_gap, potential_from, upper_gap,
    BarrierState, TraceLine, BARRIER_TOL,
};
use crate::error::{Result, SmrError};
use crate::matcore::{eigh, loewner_sandwich, LoewnerCertificate};
use crate::moracle::{whiten, GainBackend, MOracle, OracleCall, OracleCertificate, SdpBackend, SketchContext, WhitenedBasis, SPEED};
use crate::oracles::{BasisSet, LedgerSnapshot, MeasurementOracle, TermSet, WeightVector};

/// Regression constant of the output sandwich: lo = (1 − OUTPUT_C·ε)·γ.
pub const OUTPUT_C: f64 = 15.0;
/// Tolerance used by output certificates.
pub const CERT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximatorConfig {
    pub eps: f64,
    pub gamma: f64,
    pub gains: GainBackend,
    pub sdp: SdpBackend,
    /// None selects 100·ln²(2e⁴n)/(γε²S).
    pub max_iters_cap: Option<usize>,
    pub seed: u64,
    /// Keep one trace line per iteration.
    pub trace: bool,
}

impl ApproximatorConfig {
    pub fn new(eps: f64, gamma: f64) -> Self {
        ApproximatorConfig {
            eps,
            gamma,
            gains: GainBackend::Exact,
            sdp: SdpBackend::Reference,
            max_iters_cap: None,
            seed: 0,
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps)?;
        check_gamma(self.gamma)
    }

    pub fn iteration_cap(&self, n: usize) -> usize {
        self.max_iters_cap.unwrap_or_else(|| default_iteration_cap(n, self.gamma, self.eps, SPEED))
    }
}

/// 100·ln²(2e⁴n)/(γε²S).
pub fn default_iteration_cap(n: usize, gamma: f64, eps: f64, s: f64) -> usize {
    (100.0 * log_barrier_scale(n).powi(2) / (gamma * eps * eps * s)).ceil() as usize
}

/// Output of one barrier run.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproximatorRun {
    /// ε·Σ_j α^(j) divided by the final upper barrier.
    pub weights: WeightVector,
    pub iterations: usize,
    pub u_final: f64,
    pub l_final: f64,
    pub min_slack: f64,
    pub resolves: u64,
    pub trace: Vec<TraceLine>,
    /// One certificate per oracle call, kept when tracing.
    pub oracle_certificates: Vec<OracleCertificate>,
}

/// Runs the barrier method on whitened terms. `sketch` carries the raw basis
/// and oracle for the sketched gains backend.
fn run_barrier(
    terms: &TermSet,
    cfg: &ApproximatorConfig,
    raw: Option<(&BasisSet, &MeasurementOracle)>,
) -> Result<ApproximatorRun> {
    cfg.validate()?;
    let n = terms.n();
    let d = terms.d();
    let cap = cfg.iteration_cap(n);
    let mut st = BarrierState::initial(n, cfg.gamma, cfg.eps, SPEED)?;
    let (du, dl) = advance_barriers(&st)?;
    let mut oracle = MOracle::new(cfg.gains.clone(), cfg.sdp, cfg.seed);
    let mut acc = vec![0.0; d];
    let mut prev_phi = f64::INFINITY;
    let mut min_slack = f64::INFINITY;
    let mut trace = Vec::new();
    let mut certs = Vec::new();
    let ledger = raw.map(|(_, o)| o.ledger().clone());
    let mut last_snap = ledger.as_ref().map(|l| l.snapshot()).unwrap_or_default();
    if matches!(cfg.gains, GainBackend::Sketch { .. }) && raw.is_none() {
        return Err(SmrError::MissingChannel("sketched gains need oracle access to B"));
    }
    while st.u - st.l < 1.0 {
        if st.j >= cap {
            return Err(SmrError::IterCapExceeded { cap });
        }
        let up = eigh(&upper_gap(&st.a, st.u))?;
        let lo = eigh(&lower_gap(&st.a, st.l, st.gamma))?;
        check_floors(n, up.lambda_min(), lo.lambda_min())?;
        let pot = potential_from(&up, &lo)?;
        if pot.phi > prev_phi * (1.0 + BARRIER_TOL) + BARRIER_TOL {
            return Err(SmrError::BarrierViolation(format!(
                "potential increased at iteration {}: {} -> {}",
                st.j, prev_phi, pot.phi
            )));
        }
        prev_phi = pot.phi;
        let call = OracleCall::from_decompositions(&st, &up, &lo)?;
        let acc_w = WeightVector::new(acc.clone())?;
        let ctx = raw.map(|(b, o)| SketchContext { raw: b, oracle: o, accumulated: &acc_w });
        let (alpha, cert) = oracle.call(&call, terms, ctx.as_ref())?;
        min_slack = min_slack.min(cert.slack);
        let delta = terms.combination(alpha.as_slice());
        st.a = st.a.add(&delta.scale(st.eps));
        for (a, x) in acc.iter_mut().zip(alpha.as_slice()) {
            *a += st.eps * x;
        }
        if cfg.trace {
            certs.push(cert.clone());
            let snap = ledger.as_ref().map(|l| l.snapshot()).unwrap_or_default();
            trace.push(TraceLine {
                j: st.j,
                u: st.u,
                l: st.l,
                phi_u: pot.phi_u,
                phi_l: pot.phi_l,
                lambda_min_upper: up.lambda_min(),
                lambda_min_lower: lo.lambda_min(),
                ledger_diff: snap.diff(&last_snap),
            });
            last_snap = snap;
        }
        st.u += du;
        st.l += dl;
        st.j += 1;
    }
    // the final state must still sit strictly inside the barriers
    let up = eigh(&upper_gap(&st.a, st.u))?;
    let lo = eigh(&lower_gap(&st.a, st.l, st.gamma))?;
    check_floors(n, up.lambda_min(), lo.lambda_min())?;
    let weights = WeightVector::new(acc.iter().map(|a| a / st.u).collect())?;
    Ok(ApproximatorRun {
        weights,
        iterations: st.j,
        u_final: st.u,
        l_final: st.l,
        min_slack,
        resolves: oracle.resolves,
        trace,
        oracle_certificates: certs,
    })
}

/// Identity case: finds w′ with (1 − O(ε))·γ·I ⪯ Σw′_iM_i ⪯ I.
pub fn two_sided_approximator(basis: &BasisSet, cfg: &ApproximatorConfig) -> Result<ApproximatorRun> {
    if matches!(cfg.gains, GainBackend::Sketch { .. }) {
        let oracle = MeasurementOracle::from_dense(
            &crate::matcore::DenseSymmetric::identity(basis.n()),
            crate::oracles::QueryLedger::new(),
        )?;
        return run_barrier(&TermSet::from_basis(basis)?, cfg, Some((basis, &oracle)));
    }
    run_barrier(&TermSet::from_basis(basis)?, cfg, None)
}

/// Certificate of an output sandwich lo·B ⪯ Σw′M′ ⪯ hi·B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichCertificate {
    pub lo: f64,
    pub hi: f64,
    pub lower_slack: f64,
    pub upper_slack: f64,
    pub holds: bool,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl SandwichCertificate {
    pub fn from_loewner(lo: f64, hi: f64, c: &LoewnerCertificate) -> Self {
        SandwichCertificate {
            lo,
            hi,
            lower_slack: c.lower_slack,
            upper_slack: c.upper_slack,
            holds: c.holds,
            lambda_min: c.lambda_min,
            lambda_max: c.lambda_max,
        }
    }

    /// Ratio of the extreme generalized eigenvalues.
    pub fn ratio(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }
}

/// Report of a recovery run (schema 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub schema: u32,
    pub n: usize,
    pub d: usize,
    pub eps: f64,
    pub gamma: f64,
    /// Nonzero weights as (index, value).
    pub weights: Vec<(usize, f64)>,
    pub certificate: SandwichCertificate,
    pub iterations: usize,
    pub u_final: f64,
    pub l_final: f64,
    pub min_condition_two_slack: f64,
    pub oracle_resolves: u64,
    pub ledger: LedgerSnapshot,
    #[serde(skip)]
    pub dense_weights: Option<WeightVector>,
}

impl RecoveryResult {
    pub fn weight_vector(&self) -> WeightVector {
        match &self.dense_weights {
            Some(w) => w.clone(),
            None => {
                let mut v = vec![0.0; self.d];
                for &(i, x) in &self.weights {
                    v[i] = x;
                }
                WeightVector::new(v).expect("stored weights are nonnegative")
            }
        }
    }
}

/// Whitened run against a general B, certified by materializing B through
/// the forward channel (n queries) and a generalized eigensolve.
pub fn whiten_and_recover(raw: &BasisSet, oracle: &MeasurementOracle, cfg: &ApproximatorConfig) -> Result<RecoveryResult> {
    cfg.validate()?;
    let white = whiten(raw, oracle).map_err(|e| match e {
        SmrError::SingularWhitening => SmrError::SingularB,
        other => other,
    })?;
    let run = recover_whitened(&white, oracle, cfg)?;
    let b = oracle.materialize_b()?;
    let x = raw.materialize(&run.weights)?;
    let lo = (1.0 - OUTPUT_C * cfg.eps) * cfg.gamma;
    let cert = loewner_sandwich(&x, &b, lo, 1.0, CERT_TOL)?;
    Ok(RecoveryResult {
        schema: 1,
        n: raw.n(),
        d: raw.d(),
        eps: cfg.eps,
        gamma: cfg.gamma,
        weights: run.weights.sparse_pairs(),
        certificate: SandwichCertificate::from_loewner(lo, 1.0, &cert),
        iterations: run.iterations,
        u_final: run.u_final,
        l_final: run.l_final,
        min_condition_two_slack: run.min_slack,
        oracle_resolves: run.resolves,
        ledger: oracle.ledger().snapshot(),
        dense_weights: Some(run.weights),
    })
}

/// Barrier run on an already whitened basis.
pub fn recover_whitened(white: &WhitenedBasis, oracle: &MeasurementOracle, cfg: &ApproximatorConfig) -> Result<ApproximatorRun> {
    match cfg.gains {
        GainBackend::Exact => run_barrier(&white.terms, cfg, None),
        GainBackend::Sketch { .. } => run_barrier(&white.terms, cfg, Some((&white.raw, oracle))),
    }
}
