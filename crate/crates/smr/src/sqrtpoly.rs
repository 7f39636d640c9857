//! Truncated Taylor polynomials: powers λ^p around 1, the square-root
//! operator built from them, and x⁻¹·exp(1/x) around an interval midpoint.

use nalgebra::DVector;

use crate::error::{Result, SmrError};
use crate::matcore::{eigh, DenseSymmetric};

pub const DEGREE_CAP: usize = 1_000_000;
pub const GRID_POINTS: usize = 1000;
/// Default constant in the degree rule for x⁻¹·exp(1/x).
pub const FINV_EXP_C_DEG: f64 = 4.0;

/// Σ c_k (x − center)^k.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorPoly {
    pub coefficients: Vec<f64>,
    pub center: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl TaylorPoly {
    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Compensated Horner evaluation.
    pub fn eval(&self, x: f64) -> f64 {
        let y = x - self.center;
        let mut it = self.coefficients.iter().rev();
        let mut s = *it.next().unwrap_or(&0.0);
        let mut c = 0.0;
        for &a in it {
            let p = s * y;
            let pe = s.mul_add(y, -p);
            let (t, se) = two_sum(p, a);
            c = c * y + (pe + se);
            s = t;
        }
        s + c
    }

    /// p(X)·v where `apply` computes X·w. Uses exactly `degree()` products.
    pub fn apply<F>(&self, mut apply: F, v: &DVector<f64>) -> Result<DVector<f64>>
    where
        F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    {
        let d = self.degree();
        let mut r = v * self.coefficients[d];
        for k in (0..d).rev() {
            let xr = apply(&r)?;
            r = xr - &r * self.center + v * self.coefficients[k];
        }
        Ok(r)
    }

    /// p(A) for a dense symmetric A, by Horner on matrices.
    pub fn apply_dense(&self, a: &DenseSymmetric) -> DenseSymmetric {
        let n = a.n();
        let shifted = a.add_identity(-self.center);
        let d = self.degree();
        let mut r = nalgebra::DMatrix::identity(n, n) * self.coefficients[d];
        for k in (0..d).rev() {
            r = shifted.matrix() * r;
            for i in 0..n {
                r[(i, i)] += self.coefficients[k];
            }
        }
        DenseSymmetric::symmetrize(r)
    }

    /// Largest |log(T(λ)/g(λ))| over a uniform grid on [lo, hi].
    pub fn max_log_ratio<G: Fn(f64) -> f64>(&self, g: G, lo: f64, hi: f64, points: usize) -> f64 {
        grid(lo, hi, points)
            .map(|x| {
                let r = self.eval(x) / g(x);
                if r > 0.0 {
                    r.ln().abs()
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    /// Largest |T(x) − g(x)|/|g(x)| over a uniform grid on [lo, hi].
    pub fn max_relative_error<G: Fn(f64) -> f64>(&self, g: G, lo: f64, hi: f64, points: usize) -> f64 {
        grid(lo, hi, points).map(|x| ((self.eval(x) - g(x)) / g(x)).abs()).fold(0.0, f64::max)
    }
}

pub fn grid(lo: f64, hi: f64, points: usize) -> impl Iterator<Item = f64> {
    let step = if points > 1 { (hi - lo) / (points - 1) as f64 } else { 0.0 };
    (0..points).map(move |i| if i + 1 == points { hi } else { lo + step * i as f64 })
}

/// Degree rule ceil(ln(1/(ε(1−δ)²))/(1−δ)).
pub fn power_taylor_degree(delta: f64, eps: f64) -> Result<usize> {
    let t = ((1.0 / (eps * (1.0 - delta).powi(2))).ln() / (1.0 - delta)).ceil();
    if !t.is_finite() || t > DEGREE_CAP as f64 {
        return Err(SmrError::DegreeOverflow { degree: if t.is_finite() { t as usize } else { usize::MAX }, cap: DEGREE_CAP });
    }
    Ok(t.max(0.0) as usize)
}

/// Taylor polynomial of λ^p at 1 with the degree rule above; on
/// [1−δ, 1+δ] it stays within e^{±ε} of λ^p.
pub fn power_taylor(p: f64, delta: f64, eps: f64) -> Result<TaylorPoly> {
    if !(-1.0..=1.0).contains(&p) {
        return Err(SmrError::ParamOutOfRange(format!("power {p} outside [-1,1]")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("delta {delta} outside (0,1)")));
    }
    if !(eps > 0.0) {
        return Err(SmrError::ParamOutOfRange(format!("eps {eps} must be positive")));
    }
    let t = power_taylor_degree(delta, eps)?;
    // generalized binomial coefficients C(p, k)
    let mut coefficients = Vec::with_capacity(t + 1);
    let mut c = 1.0;
    coefficients.push(c);
    for k in 1..=t {
        c *= (p - (k - 1) as f64) / k as f64;
        coefficients.push(c);
    }
    Ok(TaylorPoly { coefficients, center: 1.0 })
}

type FallibleOp = Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;

/// C̃ = √s·Z·T(s·ZᵀMZ) with T the Taylor polynomial of λ^{−1/2}; then
/// C̃C̃ᵀ ≈ M⁻¹. Built from products with M, Z and Zᵀ only.
pub struct SqrtOperator {
    poly: TaylorPoly,
    scale: f64,
    apply_m: FallibleOp,
    apply_z: FallibleOp,
    apply_zt: FallibleOp,
}

impl std::fmt::Debug for SqrtOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SqrtOperator").field("degree", &self.poly.degree()).field("scale", &self.scale).finish()
    }
}

impl SqrtOperator {
    pub fn degree(&self) -> usize {
        self.poly.degree()
    }

    pub fn polynomial(&self) -> &TaylorPoly {
        &self.poly
    }

    /// Rescaling applied to ZᵀMZ before the polynomial.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let s = self.scale;
        let inner = |v: &DVector<f64>| -> Result<DVector<f64>> {
            let zv = (self.apply_z)(v)?;
            Ok((self.apply_zt)(&(self.apply_m)(&zv)?)? * s)
        };
        let t = self.poly.apply(inner, x)?;
        Ok((self.apply_z)(&t)? * s.sqrt())
    }
}

/// Square-root operator for M⁻¹ given a crude factor with α·ZZᵀ ⪯ M⁻¹ ⪯ ZZᵀ.
/// ZᵀMZ then has spectrum in [1, 1/α]; after scaling by α it lies in
/// [1−δ, 1+δ] with δ = 1−α (kept at least 1e−6 so that α = 1 is admissible).
/// The scalar accuracy is ln(1+ε)/2 so that squaring stays within 1±ε.
pub fn sqrt_operator<M, Z, Zt>(apply_m: M, apply_z: Z, apply_zt: Zt, alpha: f64, eps: f64) -> Result<SqrtOperator>
where
    M: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    Z: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    Zt: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
{
    sqrt_operator_fallible(
        move |v: &DVector<f64>| Ok(apply_m(v)),
        move |v: &DVector<f64>| Ok(apply_z(v)),
        move |v: &DVector<f64>| Ok(apply_zt(v)),
        alpha,
        eps,
    )
}

/// [`sqrt_operator`] over fallible maps.
pub fn sqrt_operator_fallible<M, Z, Zt>(
    apply_m: M,
    apply_z: Z,
    apply_zt: Zt,
    alpha: f64,
    eps: f64,
) -> Result<SqrtOperator>
where
    M: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    Z: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    Zt: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
{
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("alpha {alpha} outside (0,1]")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("eps {eps} outside (0,1)")));
    }
    let delta = (1.0 - alpha).max(1e-6);
    let poly = power_taylor(-0.5, delta, (1.0 + eps).ln() / 2.0)?;
    Ok(SqrtOperator {
        poly,
        scale: alpha,
        apply_m: Box::new(apply_m),
        apply_z: Box::new(apply_z),
        apply_zt: Box::new(apply_zt),
    })
}

/// f(x) = x⁻¹·exp(1/x).
pub fn finv_exp(x: f64) -> f64 {
    (1.0 / x).exp() / x
}

/// Taylor coefficients of x⁻¹·exp(1/x) at `center`, up to `degree`.
pub fn finv_exp_coefficients(center: f64, degree: usize) -> Vec<f64> {
    // g = 1/x = Σ (−1)^k y^k / c^{k+1}, h = exp(g) via k·h_k = Σ_j j·g_j·h_{k−j}
    let g: Vec<f64> = (0..=degree)
        .map(|k| {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            s / center.powi(k as i32 + 1)
        })
        .collect();
    let mut h = vec![0.0; degree + 1];
    h[0] = g[0].exp();
    for k in 1..=degree {
        let mut acc = 0.0;
        for j in 1..=k {
            acc += j as f64 * g[j] * h[k - j];
        }
        h[k] = acc / k as f64;
    }
    (0..=degree).map(|k| (0..=k).map(|j| g[j] * h[k - j]).sum()).collect()
}

/// Degree rule d = ceil(c·t²/x²·ln(1/(x·t·ρ))), at least 1.
pub fn finv_exp_degree(t_bound: f64, x_lo: f64, rho: f64, c_deg: f64) -> Result<usize> {
    let d = (c_deg * t_bound * t_bound / (x_lo * x_lo) * (1.0 / (x_lo * t_bound * rho)).ln()).ceil().max(1.0);
    if !d.is_finite() || d > DEGREE_CAP as f64 {
        return Err(SmrError::DegreeOverflow { degree: if d.is_finite() { d as usize } else { usize::MAX }, cap: DEGREE_CAP });
    }
    Ok(d as usize)
}

fn check_finv_args(t_bound: f64, x_lo: f64, rho: f64) -> Result<()> {
    if !(t_bound >= 1.0) || !(x_lo > 0.0 && x_lo <= t_bound) {
        return Err(SmrError::ParamOutOfRange(format!("need 0 < x_lo <= t_bound and t_bound >= 1, got x_lo={x_lo}, t={t_bound}")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("rho {rho} outside (0,1)")));
    }
    Ok(())
}

/// Taylor polynomial of x⁻¹·exp(1/x) at the midpoint of [x_lo, t_bound] with
/// the degree rule (default constant 4).
pub fn finv_exp_taylor(t_bound: f64, x_lo: f64, rho: f64) -> Result<TaylorPoly> {
    finv_exp_taylor_with(t_bound, x_lo, rho, FINV_EXP_C_DEG)
}

pub fn finv_exp_taylor_with(t_bound: f64, x_lo: f64, rho: f64, c_deg: f64) -> Result<TaylorPoly> {
    check_finv_args(t_bound, x_lo, rho)?;
    let d = finv_exp_degree(t_bound, x_lo, rho, c_deg)?;
    let center = 0.5 * (x_lo + t_bound);
    Ok(TaylorPoly { coefficients: finv_exp_coefficients(center, d), center })
}

/// Smallest-degree midpoint expansion whose grid relative error is at most
/// ρ on [x_lo, hi]. Used by the sketch, where the closed-form rule is loose.
pub fn finv_exp_taylor_adaptive(hi: f64, x_lo: f64, rho: f64, degree_cap: usize) -> Result<TaylorPoly> {
    if !(x_lo > 0.0 && x_lo <= hi) || !(rho > 0.0 && rho < 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("bad interval [{x_lo}, {hi}] or rho {rho}")));
    }
    let center = 0.5 * (x_lo + hi);
    let full = finv_exp_coefficients(center, degree_cap.min(4096));
    let mut d = 1;
    loop {
        let p = TaylorPoly { coefficients: full[..=d].to_vec(), center };
        if p.max_relative_error(finv_exp, x_lo, hi, 400) <= rho {
            return Ok(p);
        }
        if d >= full.len() - 1 {
            return Err(SmrError::DegreeOverflow { degree: d + 1, cap: degree_cap });
        }
        d = (d + 1).max((d as f64 * 1.25) as usize).min(full.len() - 1);
    }
}

/// 4t(d+1)·exp((2t−1)/x − ln x − x(d+1)/t)·f(x).
pub fn finv_exp_remainder_envelope(t_bound: f64, degree: usize, x: f64) -> f64 {
    let d1 = (degree + 1) as f64;
    4.0 * t_bound * d1 * ((2.0 * t_bound - 1.0) / x - x.ln() - x * d1 / t_bound).exp() * finv_exp(x)
}

/// Whether A^i ⪯ B^i for commuting 0 ⪯ A ⪯ B.
pub fn commuting_power_dominance_check(a: &DenseSymmetric, b: &DenseSymmetric, i: u32) -> Result<bool> {
    if a.n() != b.n() {
        return Err(SmrError::DimensionMismatch { expected: a.n(), got: b.n() });
    }
    let scale = a.max_abs().max(b.max_abs()).max(1e-300);
    let comm = (a.matrix() * b.matrix() - b.matrix() * a.matrix()).amax();
    let tol = 1e-9 * scale * scale;
    if comm > tol {
        return Err(SmrError::NotCommuting { commutator: comm, tol });
    }
    let ai = a.matrix().pow(i);
    let bi = b.matrix().pow(i);
    let diff = DenseSymmetric::new(bi - ai)?;
    let dec = eigh(&diff)?;
    let bscale = eigh(b)?.lambda_max().abs().powi(i as i32).max(1e-300);
    Ok(dec.lambda_min() >= -1e-9 * bscale)
}
