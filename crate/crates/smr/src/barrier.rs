//! Exponential barrier potential, the Ψ kernel and barrier advancement.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmrError};
use crate::matcore::{eigh, DenseSymmetric, SpectralDecomposition};
use crate::oracles::LedgerSnapshot;

/// Slack allowed on potential monotonicity and on the floors.
pub const BARRIER_TOL: f64 = 1e-9;

/// ln(2e⁴n).
pub fn log_barrier_scale(n: usize) -> f64 {
    (2.0 * 4f64.exp() * n as f64).ln()
}

/// ln⁻¹(2e⁴n), the distance both barriers keep from the spectrum.
pub fn barrier_floor(n: usize) -> f64 {
    1.0 / log_barrier_scale(n)
}

fn require_pd(dec: &SpectralDecomposition) -> Result<()> {
    if dec.lambda_min() <= 0.0 {
        return Err(SmrError::SingularInput { lambda_min: dec.lambda_min() });
    }
    Ok(())
}

/// exp(X⁻¹)·X⁻² for positive definite X.
pub fn psi(x: &DenseSymmetric) -> Result<DenseSymmetric> {
    let dec = eigh(x)?;
    psi_dec(&dec)
}

pub fn psi_dec(dec: &SpectralDecomposition) -> Result<DenseSymmetric> {
    require_pd(dec)?;
    Ok(dec.compose(&dec.eigenvalues.map(psi_scalar)))
}

pub fn psi_scalar(x: f64) -> f64 {
    (1.0 / x).exp() / (x * x)
}

/// tr exp(X⁻¹) from a decomposition.
pub fn trace_exp_inv(dec: &SpectralDecomposition) -> f64 {
    dec.eigenvalues.iter().map(|&l| (1.0 / l).exp()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    pub phi: f64,
    pub phi_u: f64,
    pub phi_l: f64,
}

/// uI − A.
pub fn upper_gap(a: &DenseSymmetric, u: f64) -> DenseSymmetric {
    a.scale(-1.0).add_identity(u)
}

/// γ⁻¹A − lI.
pub fn lower_gap(a: &DenseSymmetric, l: f64, gamma: f64) -> DenseSymmetric {
    a.scale(1.0 / gamma).add_identity(-l)
}

/// φ_u = tr exp((uI−A)⁻¹), φ_l = tr exp((γ⁻¹A − lI)⁻¹).
pub fn potential(a: &DenseSymmetric, u: f64, l: f64, gamma: f64) -> Result<Potential> {
    let up = eigh(&upper_gap(a, u))?;
    let lo = eigh(&lower_gap(a, l, gamma))?;
    potential_from(&up, &lo)
}

pub(crate) fn potential_from(up: &SpectralDecomposition, lo: &SpectralDecomposition) -> Result<Potential> {
    if up.lambda_min() <= 0.0 {
        return Err(SmrError::BarrierViolation(format!(
            "A is not below the upper barrier (lambda_min(uI - A) = {:e})",
            up.lambda_min()
        )));
    }
    if lo.lambda_min() <= 0.0 {
        return Err(SmrError::BarrierViolation(format!(
            "A is not above the lower barrier (lambda_min(A/gamma - lI) = {:e})",
            lo.lambda_min()
        )));
    }
    let phi_u = trace_exp_inv(up);
    let phi_l = trace_exp_inv(lo);
    Ok(Potential { phi: phi_u + phi_l, phi_u, phi_l })
}

/// State of the two-sided barrier method, in whitened coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierState {
    pub a: DenseSymmetric,
    pub u: f64,
    pub l: f64,
    pub gamma: f64,
    pub eps: f64,
    /// Oracle speed.
    pub s: f64,
    pub j: usize,
}

pub fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 0.05) {
        return Err(SmrError::ParamOutOfRange(format!("eps {eps} outside (0, 1/20]")));
    }
    Ok(())
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("gamma {gamma} outside (0, 1]")));
    }
    Ok(())
}

impl BarrierState {
    /// A = 0, u = 1/4, l = −1/4.
    pub fn initial(n: usize, gamma: f64, eps: f64, s: f64) -> Result<Self> {
        let st = BarrierState { a: DenseSymmetric::zeros(n), u: 0.25, l: -0.25, gamma, eps, s, j: 0 };
        st.check_params()?;
        Ok(st)
    }

    pub fn n(&self) -> usize {
        self.a.n()
    }

    pub fn check_params(&self) -> Result<()> {
        check_eps(self.eps)?;
        check_gamma(self.gamma)?;
        if !(self.s > 0.0 && self.s <= 1.0) {
            return Err(SmrError::ParamOutOfRange(format!("speed {} outside (0, 1]", self.s)));
        }
        Ok(())
    }

    pub fn potential(&self) -> Result<Potential> {
        potential(&self.a, self.u, self.l, self.gamma)
    }

    /// Step cap k = γ·ln⁻²(2e⁴n).
    pub fn step_cap(&self) -> f64 {
        self.gamma * barrier_floor(self.n()).powi(2)
    }

    /// (λ_min(uI − A), λ_min(γ⁻¹A − lI)).
    pub fn gaps(&self) -> Result<(f64, f64)> {
        Ok((
            eigh(&upper_gap(&self.a, self.u))?.lambda_min(),
            eigh(&lower_gap(&self.a, self.l, self.gamma))?.lambda_min(),
        ))
    }
}

/// Both gaps must stay at least ln⁻¹(2e⁴n) (up to tolerance).
pub fn check_floors(n: usize, gap_upper: f64, gap_lower: f64) -> Result<()> {
    let f = barrier_floor(n);
    if gap_upper < f - BARRIER_TOL || gap_lower < f - BARRIER_TOL {
        return Err(SmrError::BarrierViolation(format!(
            "floor {f:.6} violated: upper gap {gap_upper:.6}, lower gap {gap_lower:.6}"
        )));
    }
    Ok(())
}

/// δ_u = εSγ·ln⁻²(2e⁴n)·(1+2ε)/(1−4ε) and δ_l = εSγ·ln⁻²(2e⁴n)·(1−2ε)/(1+4ε).
pub fn advance_barriers(state: &BarrierState) -> Result<(f64, f64)> {
    state.check_params()?;
    let e = state.eps;
    let base = e * state.s * state.gamma * barrier_floor(state.n()).powi(2);
    Ok((base * (1.0 + 2.0 * e) / (1.0 - 4.0 * e), base * (1.0 - 2.0 * e) / (1.0 + 4.0 * e)))
}

/// ((1+2ε)·tr[Ψ(uI−A)Δ], (1−2ε)·tr[Ψ(γ⁻¹A−lI)·γ⁻¹Δ]) for PSD Δ ⪯ εγ·ln⁻²(2e⁴n)·I.
pub fn potential_change_bound(state: &BarrierState, delta: &DenseSymmetric) -> Result<(f64, f64)> {
    state.check_params()?;
    let dec = eigh(delta)?;
    let bound = state.eps * state.step_cap();
    let scale = dec.lambda_max().abs().max(bound);
    if dec.lambda_min() < -1e-12 * scale {
        return Err(SmrError::ParamOutOfRange(format!("Delta is not PSD (lambda_min = {:e})", dec.lambda_min())));
    }
    if dec.lambda_max() > bound * (1.0 + 1e-8) {
        return Err(SmrError::DeltaTooLarge { lambda_max: dec.lambda_max(), bound });
    }
    let pu = psi(&upper_gap(&state.a, state.u))?;
    let pl = psi(&lower_gap(&state.a, state.l, state.gamma))?;
    let e = state.eps;
    let upper = (1.0 + 2.0 * e) * frob_inner(&pu, delta);
    let lower = (1.0 - 2.0 * e) * frob_inner(&pl, delta) / state.gamma;
    Ok((upper, lower))
}

/// tr(XY) for symmetric X, Y.
pub fn frob_inner(x: &DenseSymmetric, y: &DenseSymmetric) -> f64 {
    x.matrix().dot(y.matrix())
}

/// One line of the barrier trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub j: usize,
    pub u: f64,
    pub l: f64,
    pub phi_u: f64,
    pub phi_l: f64,
    pub lambda_min_upper: f64,
    pub lambda_min_lower: f64,
    pub ledger_diff: LedgerSnapshot,
}
