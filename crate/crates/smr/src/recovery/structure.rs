use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lapinv::components;
use crate::error::{Result, SmrError};
use crate::matcore::{eigh, spd_inverse, DenseSymmetric};

/// Shifts at which (A⁻¹ + αI)⁻¹ is checked.
pub const STRUCTURE_ALPHAS: [f64; 4] = [0.0, 0.1, 1.0, 10.0];
/// Slack allowed on every inequality.
pub const STRUCTURE_TOL: f64 = 1e-9;

/// Diagonal dominance margin and largest off-diagonal of one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SddMeasure {
    /// min_i (m_ii − Σ_{j≠i} |m_ij|).
    pub min_dominance: f64,
    /// max_{i≠j} m_ij; ≤ 0 for nonpositive off-diagonals.
    pub max_offdiag: f64,
}

impl SddMeasure {
    pub fn of(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut min_dominance = f64::INFINITY;
        let mut max_offdiag = f64::NEG_INFINITY;
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                if i != j {
                    off += m[(i, j)].abs();
                    max_offdiag = max_offdiag.max(m[(i, j)]);
                }
            }
            min_dominance = min_dominance.min(m[(i, i)] - off);
        }
        if n < 2 {
            max_offdiag = 0.0;
        }
        SddMeasure { min_dominance, max_offdiag }
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.min_dominance >= -tol && self.max_offdiag <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftCheck {
    pub alpha: f64,
    pub measure: SddMeasure,
}

/// Structural facts about an invertible symmetric M-matrix M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub n: usize,
    /// x = M⁻¹𝟙.
    pub x_scale: Vec<f64>,
    /// XMX with X = diag(x).
    pub scaled: SddMeasure,
    /// (A⁻¹ + αI)⁻¹ for A = XMX.
    pub shifts: Vec<ShiftCheck>,
    /// Irreducible blocks of M.
    pub blocks: Vec<Vec<usize>>,
    /// Smallest entry of M⁻¹ inside an irreducible block.
    pub min_block_inverse_entry: f64,
    pub holds: bool,
}

fn validate_mmatrix(m: &DenseSymmetric) -> Result<()> {
    let n = m.n();
    if n == 0 {
        return Err(SmrError::ValidationFailed("empty matrix".into()));
    }
    let tol = STRUCTURE_TOL * m.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..n {
            if i != j && m.get(i, j) > tol {
                return Err(SmrError::ValidationFailed(format!("off-diagonal M[{i},{j}] = {} > 0", m.get(i, j))));
            }
        }
    }
    // a symmetric Z-matrix is a nonsingular M-matrix iff it is positive definite
    let lmin = eigh(m)?.lambda_min();
    if !(lmin > 0.0) {
        return Err(SmrError::ValidationFailed(format!("M is not positive definite (lambda_min = {lmin:e})")));
    }
    Ok(())
}

/// Checks, for an invertible symmetric M-matrix M:
/// XMX is SDD with nonpositive off-diagonals for X = diag(M⁻¹𝟙);
/// (A⁻¹ + αI)⁻¹ stays SDD with nonpositive off-diagonals for A = XMX;
/// M⁻¹ is entrywise positive on every irreducible block.
/// Each inequality is held to `STRUCTURE_TOL` relative to the matrix scale.
pub fn mmatrix_structure_checks(m: &DenseSymmetric) -> Result<StructureReport> {
    validate_mmatrix(m)?;
    let n = m.n();
    let minv = spd_inverse(m)?;
    let x = minv.mul_vec(&DVector::from_element(n, 1.0));
    if let Some(i) = x.iter().position(|&v| !(v > 0.0)) {
        return Err(SmrError::ValidationFailed(format!("M⁻¹𝟙 has nonpositive entry {} at {i}", x[i])));
    }
    let xd = DMatrix::from_diagonal(&x);
    let a = DenseSymmetric::new(&xd * m.matrix() * &xd)?;
    let tol_a = STRUCTURE_TOL * a.max_abs().max(1.0);
    let scaled = SddMeasure::of(a.matrix());
    if !scaled.holds(tol_a) {
        return Err(SmrError::ValidationFailed(format!(
            "XMX not SDD with nonpositive off-diagonals: dominance {:e}, max off-diagonal {:e}",
            scaled.min_dominance, scaled.max_offdiag
        )));
    }
    let a_inv = spd_inverse(&a)?;
    let mut shifts = Vec::with_capacity(STRUCTURE_ALPHAS.len());
    for &alpha in &STRUCTURE_ALPHAS {
        let s = spd_inverse(&a_inv.add_identity(alpha))?;
        let measure = SddMeasure::of(s.matrix());
        if !measure.holds(STRUCTURE_TOL * s.max_abs().max(1.0)) {
            return Err(SmrError::ValidationFailed(format!(
                "(A⁻¹ + {alpha}I)⁻¹ not SDD with nonpositive off-diagonals: dominance {:e}, max off-diagonal {:e}",
                measure.min_dominance, measure.max_offdiag
            )));
        }
        shifts.push(ShiftCheck { alpha, measure });
    }
    let blocks = components(m);
    let mut min_entry = f64::INFINITY;
    for blk in &blocks {
        for &i in blk {
            for &j in blk {
                min_entry = min_entry.min(minv.get(i, j));
            }
        }
    }
    if !(min_entry > 0.0) {
        return Err(SmrError::ValidationFailed(format!(
            "M⁻¹ has nonpositive entry {min_entry:e} inside an irreducible block"
        )));
    }
    Ok(StructureReport {
        n,
        x_scale: x.iter().copied().collect(),
        scaled,
        shifts,
        blocks,
        min_block_inverse_entry: min_entry,
        holds: true,
    })
}
