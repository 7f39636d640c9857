//! Dense symmetric linear algebra: eigendecompositions, spectral matrix
//! functions, Loewner-order certificates and extreme eigenvalues.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmrError};

/// Eigenvalues at or below `KERNEL_REL * lambda_max` count as zero.
pub const KERNEL_REL: f64 = 1e-10;
/// Orthonormality tolerance on computed eigenvectors.
pub const ORTHO_TOL: f64 = 1e-10;
/// Relative reconstruction tolerance on computed eigenpairs.
pub const RECON_TOL: f64 = 1e-8;

const EIGEN_MAX_ITERS: usize = 10_000;

/// Dense symmetric matrix. Construction symmetrizes the input as (A + Aᵀ)/2.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSymmetric {
    m: DMatrix<f64>,
}

impl DenseSymmetric {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 {
            return Err(SmrError::ParamOutOfRange("dimension must be at least 1".into()));
        }
        if m.nrows() != m.ncols() {
            return Err(SmrError::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(SmrError::ValidationFailed("matrix has non-finite entries".into()));
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes without validation. Callers guarantee a square finite input.
    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        let mut s = m.clone();
        let n = s.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        DenseSymmetric { m: s }
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(SmrError::DimensionMismatch { expected: n * n, got: data.len() });
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn identity(n: usize) -> Self {
        DenseSymmetric { m: DMatrix::identity(n, n) }
    }

    pub fn zeros(n: usize) -> Self {
        DenseSymmetric { m: DMatrix::zeros(n, n) }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        DenseSymmetric { m: DMatrix::from_diagonal(&DVector::from_row_slice(d)) }
    }

    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.m * x
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Self {
        DenseSymmetric { m: &self.m * s }
    }

    pub fn add(&self, other: &Self) -> Self {
        DenseSymmetric::symmetrize(&self.m + &other.m)
    }

    pub fn sub(&self, other: &Self) -> Self {
        DenseSymmetric::symmetrize(&self.m - &other.m)
    }

    pub fn add_identity(&self, s: f64) -> Self {
        let mut m = self.m.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += s;
        }
        DenseSymmetric { m }
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// Congruence Pᵀ·A·P, symmetrized.
    pub fn congruence(&self, p: &DMatrix<f64>) -> Self {
        DenseSymmetric::symmetrize(p.transpose() * &self.m * p)
    }
}

/// Ascending eigenvalues with orthonormal eigenvectors in columns.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Eigenvalues at or below this value are treated as zero.
    pub fn kernel_threshold(&self) -> f64 {
        let top = self.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        KERNEL_REL * top
    }

    /// Q·diag(vals)·Qᵀ.
    pub fn compose(&self, vals: &DVector<f64>) -> DenseSymmetric {
        let q = &self.eigenvectors;
        let mut scaled = q.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= vals[j];
        }
        DenseSymmetric::symmetrize(scaled * q.transpose())
    }
}

/// Symmetric eigendecomposition, sorted ascending.
pub fn eigh(a: &DenseSymmetric) -> Result<SpectralDecomposition> {
    let n = a.n();
    let scale = a.max_abs().max(1.0);
    let eig = SymmetricEigen::try_new(a.m.clone(), f64::EPSILON, EIGEN_MAX_ITERS)
        .ok_or(SmrError::NonConvergence { iterations: EIGEN_MAX_ITERS })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    let dec = SpectralDecomposition { eigenvalues, eigenvectors };
    debug_assert!(orthonormality_error(&dec.eigenvectors) <= ORTHO_TOL * (n as f64).max(1.0));
    debug_assert!(
        reconstruction_error(a, &dec) <= RECON_TOL * scale,
        "reconstruction error {} exceeds tolerance",
        reconstruction_error(a, &dec)
    );
    Ok(dec)
}

/// ‖QᵀQ − I‖_max.
pub fn orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let g = q.transpose() * q;
    let mut worst = 0.0_f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// ‖QΛQᵀ − A‖_max.
pub fn reconstruction_error(a: &DenseSymmetric, dec: &SpectralDecomposition) -> f64 {
    let r = dec.compose(&dec.eigenvalues);
    (r.matrix() - a.matrix()).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// How eigenvalues in the kernel are treated by [`matrix_function`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelPolicy {
    Reject,
    MapZeroToZero,
}

/// Q·f(Λ)·Qᵀ.
pub fn matrix_function<F: Fn(f64) -> f64>(
    a: &DenseSymmetric,
    f: F,
    policy: KernelPolicy,
) -> Result<DenseSymmetric> {
    let dec = eigh(a)?;
    matrix_function_dec(&dec, f, policy)
}

/// [`matrix_function`] on an existing decomposition.
pub fn matrix_function_dec<F: Fn(f64) -> f64>(
    dec: &SpectralDecomposition,
    f: F,
    policy: KernelPolicy,
) -> Result<DenseSymmetric> {
    let thr = dec.kernel_threshold();
    let lmin = dec.lambda_min();
    if policy == KernelPolicy::Reject && lmin <= thr {
        return Err(SmrError::SingularInput { lambda_min: lmin });
    }
    // kernel eigenvalues snap to exactly zero; f(0) is kept when finite
    // (exp(0) = 1) and replaced by 0 otherwise (the pseudo-inverse)
    let at_zero = f(0.0);
    let at_zero = if at_zero.is_finite() { at_zero } else { 0.0 };
    let vals = dec.eigenvalues.map(|l| {
        if policy == KernelPolicy::MapZeroToZero && l <= thr {
            at_zero
        } else {
            f(l)
        }
    });
    Ok(dec.compose(&vals))
}

/// Moore-Penrose pseudoinverse of a PSD matrix.
pub fn pinv(a: &DenseSymmetric) -> Result<DenseSymmetric> {
    matrix_function(a, |l| 1.0 / l, KernelPolicy::MapZeroToZero)
}

/// Outcome of a Loewner sandwich check `lo·B ⪯ X ⪯ hi·B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoewnerCertificate {
    /// Smallest generalized eigenvalue minus `lo`.
    pub lower_slack: f64,
    /// `hi` minus the largest generalized eigenvalue.
    pub upper_slack: f64,
    pub holds: bool,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Generalized eigenvalues of the pencil (X, B) on range(B), ascending.
pub fn generalized_eigenvalues(x: &DenseSymmetric, b: &DenseSymmetric) -> Result<Vec<f64>> {
    if x.n() != b.n() {
        return Err(SmrError::DimensionMismatch { expected: b.n(), got: x.n() });
    }
    let dec = eigh(b)?;
    let thr = dec.kernel_threshold();
    if dec.lambda_max() <= 0.0 {
        return Err(SmrError::ZeroMatrix);
    }
    if dec.lambda_min() < -thr.max(1e-12) * 10.0 {
        return Err(SmrError::ValidationFailed(format!(
            "B is not PSD (lambda_min = {:e})",
            dec.lambda_min()
        )));
    }
    let range: Vec<usize> = (0..b.n()).filter(|&i| dec.eigenvalues[i] > thr).collect();
    let kernel: Vec<usize> = (0..b.n()).filter(|&i| dec.eigenvalues[i] <= thr).collect();
    if !kernel.is_empty() {
        let qk = dec.eigenvectors.select_columns(kernel.iter());
        let xk = x.matrix() * &qk;
        let resid = xk.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let scale = x.max_abs().max(dec.lambda_max());
        if resid > 1e-8 * scale.max(1.0) {
            return Err(SmrError::KernelMismatch { residual: resid });
        }
    }
    let r = range.len();
    let mut w = DMatrix::zeros(b.n(), r);
    for (k, &i) in range.iter().enumerate() {
        let s = 1.0 / dec.eigenvalues[i].sqrt();
        w.set_column(k, &(dec.eigenvectors.column(i) * s));
    }
    let reduced = x.congruence(&w);
    let red = eigh(&reduced)?;
    Ok(red.eigenvalues.iter().copied().collect())
}

/// Certifies `lo·B ⪯ X ⪯ hi·B` on range(B) by generalized eigenvalues.
pub fn loewner_sandwich(
    x: &DenseSymmetric,
    b: &DenseSymmetric,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<LoewnerCertificate> {
    if lo > hi {
        return Err(SmrError::ParamOutOfRange(format!("lo {lo} exceeds hi {hi}")));
    }
    let ev = generalized_eigenvalues(x, b)?;
    let (lmin, lmax) = (ev[0], ev[ev.len() - 1]);
    let lower_slack = lmin - lo;
    let upper_slack = hi - lmax;
    Ok(LoewnerCertificate {
        lower_slack,
        upper_slack,
        holds: lower_slack >= -tol && upper_slack >= -tol,
        lambda_min: lmin,
        lambda_max: lmax,
    })
}

/// Smallest nonzero and largest eigenvalue of a PSD matrix.
pub fn extreme_eigs(a: &DenseSymmetric) -> Result<(f64, f64)> {
    let dec = eigh(a)?;
    let thr = dec.kernel_threshold();
    let lmax = dec.lambda_max();
    if lmax <= 0.0 || dec.eigenvalues.iter().all(|&l| l <= thr) {
        return Err(SmrError::ZeroMatrix);
    }
    let lmin = dec.eigenvalues.iter().copied().find(|&l| l > thr).unwrap_or(lmax);
    Ok((lmin, lmax))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(a: &DenseSymmetric) -> Result<f64> {
    Ok(eigh(a)?.lambda_max())
}

/// Dense Cholesky solve for a symmetric positive definite matrix.
pub fn spd_solve(a: &DenseSymmetric, b: &DVector<f64>) -> Result<DVector<f64>> {
    let ch = nalgebra::Cholesky::new(a.matrix().clone()).ok_or(SmrError::Singular {
        lambda_min: eigh(a).map(|d| d.lambda_min()).unwrap_or(f64::NAN),
    })?;
    Ok(ch.solve(b))
}

/// Dense inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &DenseSymmetric) -> Result<DenseSymmetric> {
    let ch = nalgebra::Cholesky::new(a.matrix().clone()).ok_or(SmrError::Singular {
        lambda_min: eigh(a).map(|d| d.lambda_min()).unwrap_or(f64::NAN),
    })?;
    Ok(DenseSymmetric::symmetrize(ch.inverse()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, seed: u64) -> DenseSymmetric {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        DenseSymmetric::new(m).unwrap()
    }

    fn random_psd(n: usize, rank: usize, seed: u64) -> DenseSymmetric {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        DenseSymmetric::new(&g * g.transpose()).unwrap()
    }

    fn gnp_laplacian(n: usize, p: f64, seed: u64) -> DenseSymmetric {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    m[(i, j)] -= 1.0;
                    m[(j, i)] -= 1.0;
                    m[(i, i)] += 1.0;
                    m[(j, j)] += 1.0;
                }
            }
        }
        DenseSymmetric::new(m).unwrap()
    }

    // Characteristic polynomial by Faddeev-LeVerrier, roots by Durand-Kerner.
    fn charpoly_roots(a: &DenseSymmetric) -> Vec<f64> {
        let n = a.n();
        let am = a.matrix();
        let mut coeffs = vec![1.0];
        let mut mk = DMatrix::<f64>::zeros(n, n);
        for k in 1..=n {
            let prod = am * &mk;
            let mut next = prod.clone();
            let c_prev = coeffs[k - 1];
            for i in 0..n {
                next[(i, i)] += c_prev;
            }
            mk = next;
            let ck = -(am * &mk).trace() / k as f64;
            coeffs.push(ck);
        }
        // p(x) = sum coeffs[k] x^{n-k}
        let eval = |x: nalgebra::Complex<f64>| {
            let mut acc = nalgebra::Complex::new(0.0, 0.0);
            for &c in &coeffs {
                acc = acc * x + c;
            }
            acc
        };
        let mut roots: Vec<nalgebra::Complex<f64>> =
            (0..n).map(|k| nalgebra::Complex::new(0.4, 0.9).powu(k as u32)).collect();
        for _ in 0..2000 {
            for i in 0..n {
                let mut denom = nalgebra::Complex::new(1.0, 0.0);
                for j in 0..n {
                    if i != j {
                        denom *= roots[i] - roots[j];
                    }
                }
                let step = eval(roots[i]) / denom;
                roots[i] -= step;
            }
        }
        // polish each root with Newton on the real line
        let mut out: Vec<f64> = roots.iter().map(|r| r.re).collect();
        for r in out.iter_mut() {
            for _ in 0..20 {
                let mut p = 0.0;
                let mut dp = 0.0;
                for &c in &coeffs {
                    dp = dp * *r + p;
                    p = p * *r + c;
                }
                if dp.abs() > 0.0 {
                    *r -= p / dp;
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }

    #[test]
    fn eigh_identity() {
        let d = eigh(&DenseSymmetric::identity(3)).unwrap();
        for &l in d.eigenvalues.iter() {
            assert_abs_diff_eq!(l, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn eigh_diagonal_sorted() {
        let d = eigh(&DenseSymmetric::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(d.eigenvalues.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn eigh_matches_charpoly_roots() {
        let a = random_sym(8, 7);
        let d = eigh(&a).unwrap();
        let roots = charpoly_roots(&a);
        for (l, r) in d.eigenvalues.iter().zip(roots.iter()) {
            assert!((l - r).abs() <= 1e-8, "{l} vs {r}");
        }
        assert!(orthonormality_error(&d.eigenvectors) <= ORTHO_TOL);
        assert!(reconstruction_error(&a, &d) <= RECON_TOL * a.max_abs().max(1.0));
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let e = matrix_function(&DenseSymmetric::zeros(2), f64::exp, KernelPolicy::MapZeroToZero)
            .unwrap();
        assert_abs_diff_eq!(e.matrix(), &DMatrix::identity(2, 2), epsilon = 1e-14);
        assert!(matrix_function(&DenseSymmetric::zeros(2), f64::exp, KernelPolicy::Reject).is_err());
    }

    #[test]
    fn pseudo_inverse_of_path() {
        let a = DenseSymmetric::from_row_slice(2, &[1.0, -1.0, -1.0, 1.0]).unwrap();
        let p = matrix_function(&a, |l| 1.0 / l, KernelPolicy::MapZeroToZero).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert_abs_diff_eq!(p.matrix(), &expect, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_of_diagonal() {
        let a = DenseSymmetric::from_diagonal(&[4.0, 9.0]);
        let s = matrix_function(&a, f64::sqrt, KernelPolicy::Reject).unwrap();
        assert_abs_diff_eq!(s.matrix(), &DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 3.0])), epsilon = 1e-12);
    }

    #[test]
    fn reject_singular() {
        let a = DenseSymmetric::from_diagonal(&[0.0, 1.0]);
        assert!(matches!(
            matrix_function(&a, f64::sqrt, KernelPolicy::Reject),
            Err(SmrError::SingularInput { .. })
        ));
    }

    #[test]
    fn sandwich_identity() {
        let i = DenseSymmetric::identity(3);
        let c = loewner_sandwich(&i, &i, 1.0, 1.0, 1e-12).unwrap();
        assert!(c.holds);
        assert_abs_diff_eq!(c.lower_slack, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.upper_slack, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn sandwich_diagonal_half() {
        let x = DenseSymmetric::from_diagonal(&[1.0, 2.0]);
        let b = DenseSymmetric::from_diagonal(&[2.0, 4.0]);
        let c = loewner_sandwich(&x, &b, 0.5, 0.5, 1e-12).unwrap();
        assert!(c.holds);
        assert_abs_diff_eq!(c.lower_slack, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn sandwich_scaled_laplacian_against_direct_pencil() {
        let l = gnp_laplacian(8, 0.5, 3);
        let x = l.scale(0.9);
        let c = loewner_sandwich(&x, &l, 0.9, 1.0, 1e-9).unwrap();
        assert!(c.holds);
        // independent oracle: on range(L), L^{+1/2} X L^{+1/2} has eigenvalue 0.9
        let root = matrix_function(&l, |v| 1.0 / v.sqrt(), KernelPolicy::MapZeroToZero).unwrap();
        let m = DenseSymmetric::symmetrize(root.matrix() * x.matrix() * root.matrix());
        let ev = eigh(&m).unwrap();
        let nonzero: Vec<f64> = ev.eigenvalues.iter().copied().filter(|v| v.abs() > 1e-8).collect();
        for v in nonzero {
            assert_abs_diff_eq!(v, 0.9, epsilon = 1e-9);
        }
    }

    #[test]
    fn sandwich_kernel_mismatch() {
        let b = DenseSymmetric::from_diagonal(&[1.0, 0.0]);
        let x = DenseSymmetric::identity(2);
        assert!(matches!(
            loewner_sandwich(&x, &b, 0.0, 2.0, 1e-9),
            Err(SmrError::KernelMismatch { .. })
        ));
    }

    #[test]
    fn extreme_eig_examples() {
        assert_eq!(extreme_eigs(&DenseSymmetric::identity(3)).unwrap(), (1.0, 1.0));
        let p = DenseSymmetric::from_row_slice(2, &[1.0, -1.0, -1.0, 1.0]).unwrap();
        let (lo, hi) = extreme_eigs(&p).unwrap();
        assert_abs_diff_eq!(lo, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 2.0, epsilon = 1e-12);
        let (lo, hi) = extreme_eigs(&DenseSymmetric::from_diagonal(&[0.0, 3.0, 5.0])).unwrap();
        assert_eq!((lo, hi), (3.0, 5.0));
        assert_eq!(extreme_eigs(&DenseSymmetric::zeros(2)), Err(SmrError::ZeroMatrix));
    }

    #[test]
    fn construction_symmetrizes() {
        let a = DenseSymmetric::from_row_slice(2, &[1.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.get(0, 1), a.get(1, 0));
        assert_eq!(a.get(0, 1), 1.0);
        assert!(DenseSymmetric::new(DMatrix::zeros(0, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matrix_function_keeps_eigenvectors(seed in 0u64..1000, n in 2usize..7) {
            let a = random_psd(n, n, seed);
            let dec = eigh(&a).unwrap();
            let fa = matrix_function(&a, f64::sqrt, KernelPolicy::Reject).unwrap();
            // f(A) commutes with A and f(A)^2 = A
            let sq = fa.matrix() * fa.matrix();
            let scale = a.max_abs().max(1.0);
            prop_assert!((sq - a.matrix()).amax() <= 1e-8 * scale);
            let direct = dec.compose(&dec.eigenvalues.map(f64::sqrt));
            prop_assert!((direct.matrix() - fa.matrix()).amax() <= 1e-8 * scale);
        }

        #[test]
        fn pseudo_inverse_identity(seed in 0u64..1000, n in 3usize..8, rank in 1usize..3) {
            let a = random_psd(n, rank, seed);
            let p = pinv(&a).unwrap();
            let apa = a.matrix() * p.matrix() * a.matrix();
            prop_assert!((apa - a.matrix()).amax() <= 1e-8 * a.max_abs().max(1.0));
        }

        #[test]
        fn sandwich_agrees_with_quadratic_forms(seed in 0u64..1000, n in 2usize..7) {
            let b = random_psd(n, n, seed).add_identity(0.1);
            let x = random_psd(n, n, seed + 17).add_identity(0.05);
            let ev = generalized_eigenvalues(&x, &b).unwrap();
            let (lo, hi) = (ev[0], ev[ev.len() - 1]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let xv = v.dot(&(x.matrix() * &v));
                let bv = v.dot(&(b.matrix() * &v));
                prop_assert!(xv - lo * bv >= -1e-9 * bv.abs().max(1.0));
                prop_assert!(hi * bv - xv >= -1e-9 * bv.abs().max(1.0));
            }
        }
    }
}
