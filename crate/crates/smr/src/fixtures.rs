//! Seeded instance generators with ground truth.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmrError};
use crate::matcore::{eigh, extreme_eigs, matrix_function, pinv, spd_inverse, DenseSymmetric, KernelPolicy};
use crate::recovery::components;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(SmrError::ParamOutOfRange("n must be at least 1".into()));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SmrError::ParamOutOfRange(format!("edge probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Laplacian of a weighted edge list.
pub fn laplacian_from_edges(n: usize, edges: &[(usize, usize, f64)]) -> DenseSymmetric {
    let mut m = DMatrix::zeros(n, n);
    for &(i, j, w) in edges {
        m[(i, i)] += w;
        m[(j, j)] += w;
        m[(i, j)] -= w;
        m[(j, i)] -= w;
    }
    DenseSymmetric::new(m).expect("finite weights")
}

pub fn path_laplacian(n: usize) -> DenseSymmetric {
    let e: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
    laplacian_from_edges(n, &e)
}

pub fn cycle_laplacian(n: usize) -> DenseSymmetric {
    let e: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
    laplacian_from_edges(n, &e)
}

pub fn complete_laplacian(n: usize) -> DenseSymmetric {
    let mut e = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            e.push((i, j, 1.0));
        }
    }
    laplacian_from_edges(n, &e)
}

/// Two disjoint unit triangles on {0,1,2} and {3,4,5}.
pub fn two_triangles() -> DenseSymmetric {
    let e = [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (3, 4, 1.0), (4, 5, 1.0), (3, 5, 1.0)];
    laplacian_from_edges(6, &e)
}

/// True when the off-diagonal pattern of `l` is connected.
pub fn is_connected(l: &DenseSymmetric) -> bool {
    components(l).len() == 1
}

/// Laplacian of G(n, p) with edge weights uniform in [1, 2).
pub fn gnp_laplacian(n: usize, p: f64, seed: u64) -> Result<DenseSymmetric> {
    check_n(n)?;
    check_p(p)?;
    let mut r = rng(seed);
    let mut e = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if r.random_bool(p) {
                e.push((i, j, r.random_range(1.0..2.0)));
            }
        }
    }
    Ok(laplacian_from_edges(n, &e))
}

/// G(n, p) plus a random spanning path, so the graph is always connected.
pub fn connected_gnp_laplacian(n: usize, p: f64, seed: u64) -> Result<DenseSymmetric> {
    let base = gnp_laplacian(n, p, seed)?;
    let mut r = rng(seed ^ PATH_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let e: Vec<_> = order.windows(2).map(|w| (w[0], w[1], r.random_range(1.0..2.0))).collect();
    Ok(base.add(&laplacian_from_edges(n, &e)))
}

// distinct stream for the spanning path
const PATH_STREAM: u64 = 0x5eed_0f7a;

/// SDDM matrix: connected Laplacian plus a positive diagonal excess in [0.1, 1).
pub fn sddm(n: usize, p: f64, seed: u64) -> Result<DenseSymmetric> {
    let l = connected_gnp_laplacian(n, p, seed)?;
    let mut r = rng(seed.wrapping_add(1));
    let excess: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
    Ok(l.add(&DenseSymmetric::from_diagonal(&excess)))
}

/// Invertible symmetric M-matrix s·I − N, N ≥ 0 symmetric with density p,
/// s = ρ(N)·(1 + margin), margin uniform in [0.05, 1).
pub fn random_mmatrix(n: usize, p: f64, seed: u64) -> Result<DenseSymmetric> {
    check_n(n)?;
    check_p(p)?;
    let mut r = rng(seed);
    let mut nn = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if r.random_bool(p) {
                let w = r.random_range(0.1..1.0);
                nn[(i, j)] = w;
                nn[(j, i)] = w;
            }
        }
        nn[(i, i)] = r.random_range(0.0..0.5);
    }
    let nsym = DenseSymmetric::new(nn)?;
    let (lo, hi) = extreme_eigs(&nsym)?;
    let rho = hi.abs().max(lo.abs()).max(0.1);
    let s = rho * (1.0 + r.random_range(0.05..1.0));
    Ok(nsym.scale(-1.0).add_identity(s))
}

/// Witness L and A = L + (1/γ − 1)·L^{1/2}RL^{1/2} with 0 ⪯ R ⪯ I random,
/// so γA ⪯ L ⪯ A and ker A = ker L.
pub fn perturbed_laplacian(n: usize, p: f64, gamma: f64, seed: u64) -> Result<(DenseSymmetric, DenseSymmetric)> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("gamma {gamma} outside (0, 1]")));
    }
    let l = connected_gnp_laplacian(n, p, seed)?;
    let mut r = rng(seed.wrapping_add(2));
    let g = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    let q = g.qr().q();
    let d = DVector::from_fn(n, |_, _| r.random_range(0.0..1.0));
    let rmat = &q * DMatrix::from_diagonal(&d) * q.transpose();
    let root = matrix_function(&l, |x| x.max(0.0).sqrt(), KernelPolicy::MapZeroToZero)?.into_matrix();
    let a = DenseSymmetric::new(l.matrix() + (1.0 / gamma - 1.0) * &root * rmat * &root)?;
    Ok((l, a))
}

/// Ground truth attached to a generated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMeta {
    pub schema: u32,
    pub generator: String,
    pub n: usize,
    pub p: f64,
    pub seed: u64,
    pub gamma: f64,
    pub connected: bool,
    /// Extreme nonzero eigenvalues of the main matrix.
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// ‖MA − I‖_max for inverse pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inverse_residual: Option<f64>,
}

/// A generated instance: named matrices plus metadata.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub matrices: Vec<(String, DenseSymmetric)>,
    pub meta: FixtureMeta,
}

fn nonzero_range(a: &DenseSymmetric) -> Result<(f64, f64)> {
    let dec = eigh(a)?;
    let thr = dec.kernel_threshold();
    let nz: Vec<f64> = dec.eigenvalues.iter().copied().filter(|v| v.abs() > thr).collect();
    if nz.is_empty() {
        return Ok((0.0, 0.0));
    }
    Ok((nz.iter().copied().fold(f64::INFINITY, f64::min), nz.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
}

pub const GENERATORS: [&str; 5] = ["gnp-laplacian", "sddm", "inverse-m", "lap-pinv", "perturbed"];

/// Runs a named generator.
pub fn generate(name: &str, n: usize, p: f64, gamma: f64, seed: u64) -> Result<Fixture> {
    check_n(n)?;
    check_p(p)?;
    let mut inverse_residual = None;
    let (matrices, main, connected) = match name {
        "gnp-laplacian" => {
            let l = gnp_laplacian(n, p, seed)?;
            let c = is_connected(&l);
            (vec![("L".to_string(), l.clone())], l, c)
        }
        "sddm" => {
            let m = sddm(n, p, seed)?;
            (vec![("M".to_string(), m.clone())], m, true)
        }
        "inverse-m" => {
            let m = random_mmatrix(n, p, seed)?;
            let a = spd_inverse(&m)?;
            let res = (m.matrix() * a.matrix() - DMatrix::identity(n, n)).amax();
            if res > 1e-10 {
                return Err(SmrError::ValidationFailed(format!("inverse residual {res:e} exceeds 1e-10")));
            }
            inverse_residual = Some(res);
            let c = is_connected(&m);
            (vec![("M".to_string(), m), ("A".to_string(), a.clone())], a, c)
        }
        "lap-pinv" => {
            let l = gnp_laplacian(n, p, seed)?;
            let a = pinv(&l)?;
            let c = is_connected(&l);
            (vec![("L".to_string(), l), ("A".to_string(), a.clone())], a, c)
        }
        "perturbed" => {
            let (l, a) = perturbed_laplacian(n, p, gamma, seed)?;
            (vec![("L".to_string(), l), ("A".to_string(), a.clone())], a, true)
        }
        other => {
            return Err(SmrError::ParamOutOfRange(format!(
                "unknown generator {other:?}; expected one of {}",
                GENERATORS.join(", ")
            )))
        }
    };
    let (lambda_min, lambda_max) = nonzero_range(&main)?;
    Ok(Fixture {
        matrices,
        meta: FixtureMeta {
            schema: 1,
            generator: name.to_string(),
            n,
            p,
            seed,
            gamma: if name == "perturbed" { gamma } else { 1.0 },
            connected,
            lambda_min,
            lambda_max,
            inverse_residual,
        },
    })
}
