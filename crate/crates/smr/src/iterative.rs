//! Preconditioned Richardson iteration and kernel-aware consistent solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmrError};
use crate::matcore::{eigh, DenseSymmetric};

/// Relative residual used wherever an "exact" inner solve is assumed.
pub const INNER_TOL: f64 = 1e-12;
/// Window and factor of the stagnation test.
pub const STAGNATION_WINDOW: usize = 50;
pub const STAGNATION_FACTOR: f64 = 1.0 - 1e-3;

#[derive(Debug, Clone)]
pub struct RichardsonConfig {
    pub eta: f64,
    pub max_iters: usize,
    /// Relative residual at which the iteration stops.
    pub target: f64,
    /// When set, the H-norm of every update is recorded.
    pub norm_matrix: Option<DenseSymmetric>,
}

impl RichardsonConfig {
    pub fn new(eta: f64, max_iters: usize, target: f64) -> Result<Self> {
        let cfg = RichardsonConfig { eta, max_iters, target, norm_matrix: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(SmrError::ParamOutOfRange(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(SmrError::ParamOutOfRange(format!("target must lie in (0,1), got {}", self.target)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RichardsonOutcome {
    pub x: DVector<f64>,
    pub iters: usize,
    pub converged: bool,
    /// Relative residual ‖Ax_i − b‖/‖b‖ for i = 0..=iters.
    pub residuals: Vec<f64>,
    /// ‖x_{i+1} − x_i‖_H per update, when a norm matrix was given.
    pub h_step_norms: Vec<f64>,
}

impl RichardsonOutcome {
    pub fn residual(&self) -> f64 {
        *self.residuals.last().unwrap_or(&0.0)
    }
}

/// x_{i+1} = x_i − η·solveB(A x_i − b), starting from zero.
pub fn precond_richardson<A, S>(
    mut apply_a: A,
    mut solve_b: S,
    b: &DVector<f64>,
    cfg: &RichardsonConfig,
) -> Result<RichardsonOutcome>
where
    A: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    S: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    cfg.validate()?;
    let n = b.len();
    let bn = b.norm();
    let mut x = DVector::zeros(n);
    let mut out = RichardsonOutcome {
        x: x.clone(),
        iters: 0,
        converged: true,
        residuals: vec![if bn == 0.0 { 0.0 } else { 1.0 }],
        h_step_norms: Vec::new(),
    };
    if bn == 0.0 {
        return Ok(out);
    }
    // r = A x − b, with x_0 = 0
    let mut r = -b.clone();
    for i in 0..cfg.max_iters {
        let step = solve_b(&r)? * cfg.eta;
        if let Some(h) = &cfg.norm_matrix {
            out.h_step_norms.push(step.dot(&h.mul_vec(&step)).max(0.0).sqrt());
        }
        x -= step;
        r = apply_a(&x)? - b;
        let rel = r.norm() / bn;
        out.residuals.push(rel);
        out.iters = i + 1;
        if !rel.is_finite() {
            return Err(SmrError::Stagnation { iterations: i + 1, residual: rel });
        }
        if rel <= cfg.target {
            out.x = x;
            return Ok(out);
        }
        let k = out.residuals.len() - 1;
        if k >= STAGNATION_WINDOW && rel > STAGNATION_FACTOR * out.residuals[k - STAGNATION_WINDOW] {
            return Err(SmrError::Stagnation { iterations: i + 1, residual: rel });
        }
    }
    out.x = x;
    out.converged = false;
    Ok(out)
}

/// ceil(r·ln(κ/ε)) + 1.
pub fn richardson_iteration_bound(r: f64, kappa: f64, eps: f64) -> usize {
    ((r * (kappa / eps).ln()).ceil().max(0.0) as usize) + 1
}

/// Orthonormal basis of the numerical kernel of a PSD matrix.
pub fn detect_kernel(a: &DenseSymmetric) -> Result<DMatrix<f64>> {
    let dec = eigh(a)?;
    let thr = dec.kernel_threshold();
    let idx: Vec<usize> = (0..a.n()).filter(|&i| dec.eigenvalues[i] <= thr).collect();
    Ok(dec.eigenvectors.select_columns(idx.iter()))
}

/// The all-ones direction, normalized, as a one-column kernel basis.
pub fn ones_kernel(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, 1, 1.0 / (n as f64).sqrt())
}

/// Solves Ax = b for singular PSD A and b in range(A), preconditioning with
/// C ≻ 0 (typically A + λ_min·I). `kernel` is an orthonormal basis of ker(A);
/// when absent it is detected from n products with A. The returned solution is
/// orthogonal to the kernel.
pub fn consistent_singular_solve<A, S>(
    mut apply_a: A,
    solve_c: S,
    b: &DVector<f64>,
    target: f64,
    kernel: Option<&DMatrix<f64>>,
) -> Result<RichardsonOutcome>
where
    A: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    S: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = b.len();
    let detected;
    let ker = match kernel {
        Some(k) => k,
        None => {
            let mut m = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                m.set_column(j, &apply_a(&e)?);
            }
            detected = detect_kernel(&DenseSymmetric::new(m)?)?;
            &detected
        }
    };
    let bn = b.norm();
    if bn == 0.0 {
        return precond_richardson(apply_a, solve_c, b, &RichardsonConfig::new(1.0, 1, 0.5)?);
    }
    let comp = if ker.ncols() > 0 { (ker.transpose() * b).norm() / bn } else { 0.0 };
    if comp > target {
        return Err(SmrError::Inconsistent { component: comp, tol: target });
    }
    let budget = 2 * richardson_iteration_bound(1.0 / std::f64::consts::LN_2, 1.0, target) + 20;
    let cfg = RichardsonConfig::new(1.0, budget, target)?;
    let mut out = precond_richardson(&mut apply_a, solve_c, b, &cfg)?;
    if ker.ncols() > 0 {
        let proj = ker * (ker.transpose() * &out.x);
        out.x -= proj;
    }
    if !out.converged {
        return Err(SmrError::NonConvergence { iterations: out.iters });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{pinv, spd_solve};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_ops(
        a: &DenseSymmetric,
    ) -> impl FnMut(&DVector<f64>) -> Result<DVector<f64>> + '_ {
        move |x| Ok(a.mul_vec(x))
    }

    fn path3() -> DenseSymmetric {
        DenseSymmetric::from_row_slice(3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]).unwrap()
    }

    #[test]
    fn one_step_with_identity() {
        let i2 = DenseSymmetric::identity(2);
        let b = DVector::from_row_slice(&[5.0, -2.0]);
        let cfg = RichardsonConfig::new(1.0, 10, 1e-12).unwrap();
        let out = precond_richardson(dense_ops(&i2), dense_ops(&i2), &b, &cfg).unwrap();
        assert_eq!(out.iters, 1);
        assert_eq!(out.x, b);
    }

    #[test]
    fn diagonal_contraction_is_one_half() {
        let a = DenseSymmetric::from_diagonal(&[1.0, 2.0]);
        let i2 = DenseSymmetric::identity(2);
        let b = DVector::from_row_slice(&[1.0, 0.0]);
        let cfg = RichardsonConfig::new(0.5, 20, 1e-6).unwrap();
        let out = precond_richardson(dense_ops(&a), dense_ops(&i2), &b, &cfg).unwrap();
        for w in out.residuals.windows(2) {
            assert_abs_diff_eq!(w[1] / w[0], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn path_laplacian_halves_residual() {
        let a = path3();
        let (lmin, _) = crate::matcore::extreme_eigs(&a).unwrap();
        let c = a.add_identity(lmin);
        let b = DVector::from_row_slice(&[1.0, 0.0, -1.0]);
        let cfg = RichardsonConfig::new(1.0, 30, 1e-15).unwrap();
        let out = precond_richardson(dense_ops(&a), |r| spd_solve(&c, r), &b, &cfg).unwrap();
        for (k, r) in out.residuals.iter().enumerate() {
            assert!(*r <= 0.5f64.powi(k as i32) * (1.0 + 1e-6), "k={k} r={r}");
        }
    }

    #[test]
    fn exact_preconditioner_converges_in_one_step() {
        let a = DenseSymmetric::from_row_slice(2, &[3.0, 1.0, 1.0, 2.0]).unwrap();
        let b = DVector::from_row_slice(&[1.0, 1.0]);
        let cfg = RichardsonConfig::new(1.0, 5, 1e-12).unwrap();
        let out = precond_richardson(dense_ops(&a), |r| spd_solve(&a, r), &b, &cfg).unwrap();
        assert_eq!(out.iters, 1);
    }

    #[test]
    fn stagnation_is_reported() {
        let a = DenseSymmetric::from_diagonal(&[1.0, 1e-9]);
        let i2 = DenseSymmetric::identity(2);
        let b = DVector::from_row_slice(&[0.0, 1.0]);
        let cfg = RichardsonConfig::new(1.0, 1000, 1e-6).unwrap();
        let err = precond_richardson(dense_ops(&a), dense_ops(&i2), &b, &cfg).unwrap_err();
        assert!(matches!(err, SmrError::Stagnation { iterations: 50, .. }));
        assert!(RichardsonConfig::new(0.0, 1, 0.5).is_err());
        assert!(RichardsonConfig::new(1.0, 1, 1.0).is_err());
    }

    #[test]
    fn iteration_bound_examples() {
        assert_eq!(richardson_iteration_bound(1.0, 1.0, 0.5), 2);
        assert_eq!(richardson_iteration_bound(2.0, 100.0, 1e-6), 38);
        // 40·ln(1e14) = 1289.45…, so the formula gives 1290 + 1
        assert_eq!(richardson_iteration_bound(40.0, 1e4, 1e-10), 1291);
    }

    #[test]
    fn singular_solve_examples() {
        let a = DenseSymmetric::from_row_slice(2, &[1.0, -1.0, -1.0, 1.0]).unwrap();
        let c = a.add_identity(2.0);
        let b = DVector::from_row_slice(&[1.0, -1.0]);
        let out = consistent_singular_solve(dense_ops(&a), |r| spd_solve(&c, r), &b, 1e-12, None).unwrap();
        // minimum-norm solution A†b with A† = [[.25,−.25],[−.25,.25]]
        let oracle = pinv(&a).unwrap().mul_vec(&b);
        assert_abs_diff_eq!(out.x, oracle, epsilon = 1e-11);
        assert_abs_diff_eq!(out.x, DVector::from_row_slice(&[0.5, -0.5]), epsilon = 1e-11);
        let ones = DVector::from_row_slice(&[1.0, 1.0]);
        let err = consistent_singular_solve(dense_ops(&a), |r| spd_solve(&c, r), &ones, 1e-12, None);
        assert!(matches!(err, Err(SmrError::Inconsistent { .. })));
    }

    #[test]
    fn random_connected_laplacian_solve() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                // a path backbone keeps it connected
                let w = if j == i + 1 || rng.random_bool(0.4) { rng.random_range(0.5..2.0) } else { 0.0 };
                m[(i, j)] -= w;
                m[(j, i)] -= w;
                m[(i, i)] += w;
                m[(j, j)] += w;
            }
        }
        let a = DenseSymmetric::new(m).unwrap();
        let (lmin, _) = crate::matcore::extreme_eigs(&a).unwrap();
        let c = a.add_identity(lmin);
        let mut b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mean = b.mean();
        b.add_scalar_mut(-mean);
        let out =
            consistent_singular_solve(dense_ops(&a), |r| spd_solve(&c, r), &b, 1e-8, Some(&ones_kernel(n))).unwrap();
        assert!(out.iters <= 60);
        assert!((a.mul_vec(&out.x) - &b).norm() <= 1e-8 * b.norm());
        let oracle = pinv(&a).unwrap().mul_vec(&b);
        assert!((out.x - oracle).amax() <= 1e-7);
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DenseSymmetric {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        DenseSymmetric::new(&g * g.transpose() + DMatrix::identity(n, n) * 0.1).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // B ⪰ A ⪰ B/r with η = 1 contracts the residual by at most 1 − 1/r in the A⁻¹-norm;
        // measured in the error A-norm, which is what the iteration controls.
        #[test]
        fn contraction_law(seed in 0u64..1000, n in 2usize..16, r in 1.5f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bmat = random_spd(n, &mut rng);
            // A = B^{1/2} D B^{1/2} with spectrum of B⁻¹A inside [1/r, 1]
            let root = crate::matcore::matrix_function(&bmat, f64::sqrt, crate::matcore::KernelPolicy::Reject).unwrap();
            let d: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 / r } else if i == 1 { 1.0 } else { rng.random_range(1.0 / r..1.0) }).collect();
            let q = crate::matcore::eigh(&random_spd(n, &mut rng)).unwrap().eigenvectors;
            let mid = DenseSymmetric::new(&q * DMatrix::from_diagonal(&DVector::from_vec(d)) * q.transpose()).unwrap();
            let a = DenseSymmetric::new(root.matrix() * mid.matrix() * root.matrix()).unwrap();
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let xstar = spd_solve(&a, &b).unwrap();
            let cfg = RichardsonConfig::new(1.0, 25, 1e-10).unwrap();
            let mut errs = Vec::new();
            let mut x = DVector::zeros(n);
            for _ in 0..25 {
                let e = &x - &xstar;
                errs.push(e.dot(&a.mul_vec(&e)).sqrt());
                let r_vec = a.mul_vec(&x) - &b;
                x -= spd_solve(&bmat, &r_vec).unwrap();
            }
            for w in errs.windows(2) {
                if w[0] > 1e-6 * errs[0] {
                    prop_assert!(w[1] / w[0] <= 1.0 - 1.0 / r + 1e-9);
                }
            }
            let out = precond_richardson(|v: &DVector<f64>| Ok(a.mul_vec(v)), |v: &DVector<f64>| spd_solve(&bmat, v), &b, &cfg).unwrap();
            prop_assert!(out.residual() <= 1.0);
        }

        // ‖x_t − A†b‖_H ≤ cᵗ‖A†b‖_H with c = ‖I − ηB⁻¹A‖_H and H = A.
        #[test]
        fn error_norm_certificate(seed in 0u64..1000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let bmat = a.add(&random_spd(n, &mut rng).scale(0.3));
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let xstar = spd_solve(&a, &b).unwrap();
            // c from the generalized spectrum of (A, B)
            let ev = crate::matcore::generalized_eigenvalues(&a, &bmat).unwrap();
            let c = ev.iter().map(|l| (1.0 - l).abs()).fold(0.0, f64::max);
            let hn = |v: &DVector<f64>| v.dot(&a.mul_vec(v)).sqrt();
            for t in 1..8 {
                let cfg = RichardsonConfig::new(1.0, t, 1e-16).unwrap();
                let out = precond_richardson(|v: &DVector<f64>| Ok(a.mul_vec(v)), |v: &DVector<f64>| spd_solve(&bmat, v), &b, &cfg).unwrap();
                prop_assert!(hn(&(&out.x - &xstar)) <= c.powi(out.iters as i32) * hn(&xstar) * (1.0 + 1e-8) + 1e-12);
            }
        }
    }
}
