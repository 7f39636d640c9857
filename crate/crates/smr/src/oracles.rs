//! Restricted-access measurement interface: the oracle for B, basis families
//! with implicit graph kinds, weight vectors and the query ledger.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmrError};
use crate::matcore::{eigh, matrix_function, DenseSymmetric, KernelPolicy};

/// Weights down to this value are clamped to zero; anything lower is rejected.
pub const WEIGHT_CLAMP: f64 = -1e-12;
/// Dimension up to which combination solves use dense Cholesky.
pub const DENSE_SOLVE_MAX_N: usize = 128;

/// Measurement channels counted by the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    B,
    Binv,
    Sqrt,
    Mv,
    Qf,
    Solve,
    Root,
}

const CHANNELS: [Channel; 7] =
    [Channel::B, Channel::Binv, Channel::Sqrt, Channel::Mv, Channel::Qf, Channel::Solve, Channel::Root];

impl Channel {
    fn index(self) -> usize {
        match self {
            Channel::B => 0,
            Channel::Binv => 1,
            Channel::Sqrt => 2,
            Channel::Mv => 3,
            Channel::Qf => 4,
            Channel::Solve => 5,
            Channel::Root => 6,
        }
    }
}

/// Monotone per-channel query counters. Updates are atomic.
#[derive(Debug, Default)]
pub struct QueryLedger {
    counts: [AtomicU64; 7],
}

/// Point-in-time copy of a ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    #[serde(rename = "B")]
    pub b: u64,
    #[serde(rename = "Binv")]
    pub binv: u64,
    pub sqrt: u64,
    #[serde(rename = "MV")]
    pub mv: u64,
    #[serde(rename = "QF")]
    pub qf: u64,
    pub solve: u64,
    pub root: u64,
}

impl LedgerSnapshot {
    pub fn get(&self, ch: Channel) -> u64 {
        match ch {
            Channel::B => self.b,
            Channel::Binv => self.binv,
            Channel::Sqrt => self.sqrt,
            Channel::Mv => self.mv,
            Channel::Qf => self.qf,
            Channel::Solve => self.solve,
            Channel::Root => self.root,
        }
    }

    /// Per-channel difference `self − earlier`.
    pub fn diff(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            b: self.b - earlier.b,
            binv: self.binv - earlier.binv,
            sqrt: self.sqrt - earlier.sqrt,
            mv: self.mv - earlier.mv,
            qf: self.qf - earlier.qf,
            solve: self.solve - earlier.solve,
            root: self.root - earlier.root,
        }
    }

    pub fn add(&self, o: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            b: self.b + o.b,
            binv: self.binv + o.binv,
            sqrt: self.sqrt + o.sqrt,
            mv: self.mv + o.mv,
            qf: self.qf + o.qf,
            solve: self.solve + o.solve,
            root: self.root + o.root,
        }
    }

    pub fn total(&self) -> u64 {
        CHANNELS.iter().map(|&c| self.get(c)).sum()
    }
}

impl QueryLedger {
    pub fn new() -> Arc<Self> {
        Arc::new(QueryLedger::default())
    }

    pub fn record(&self, ch: Channel) {
        self.counts[ch.index()].fetch_add(1, Ordering::SeqCst);
    }

    pub fn get(&self, ch: Channel) -> u64 {
        self.counts[ch.index()].load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            b: self.get(Channel::B),
            binv: self.get(Channel::Binv),
            sqrt: self.get(Channel::Sqrt),
            mv: self.get(Channel::Mv),
            qf: self.get(Channel::Qf),
            solve: self.get(Channel::Solve),
            root: self.get(Channel::Root),
        }
    }
}

pub type LinearMap<'a> = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'a>;
pub type FallibleMap<'a> = Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'a>;

/// Restricted access to a PSD matrix B: products with B, optionally with B⁻¹
/// and with a factor C satisfying CCᵀ = B. Every product is recorded.
pub struct MeasurementOracle<'a> {
    n: usize,
    apply_b: FallibleMap<'a>,
    apply_binv: Option<FallibleMap<'a>>,
    apply_sqrt: Option<FallibleMap<'a>>,
    ledger: Arc<QueryLedger>,
}

impl std::fmt::Debug for MeasurementOracle<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasurementOracle")
            .field("n", &self.n)
            .field("binv", &self.apply_binv.is_some())
            .field("sqrt", &self.apply_sqrt.is_some())
            .field("ledger", &self.ledger.snapshot())
            .finish()
    }
}

impl<'a> MeasurementOracle<'a> {
    pub fn new(n: usize, apply_b: LinearMap<'a>, ledger: Arc<QueryLedger>) -> Self {
        Self::new_fallible(n, Box::new(move |x| Ok(apply_b(x))), ledger)
    }

    /// Forward channel that may itself fail (e.g. an inner iterative solve).
    pub fn new_fallible(n: usize, apply_b: FallibleMap<'a>, ledger: Arc<QueryLedger>) -> Self {
        MeasurementOracle { n, apply_b, apply_binv: None, apply_sqrt: None, ledger }
    }

    pub fn with_binv(mut self, f: FallibleMap<'a>) -> Self {
        self.apply_binv = Some(f);
        self
    }

    pub fn with_sqrt(mut self, f: FallibleMap<'a>) -> Self {
        self.apply_sqrt = Some(f);
        self
    }

    /// Full access to a dense positive definite B: Cholesky inverse and the
    /// symmetric square root.
    pub fn from_dense(b: &DenseSymmetric, ledger: Arc<QueryLedger>) -> Result<Self> {
        let dec = eigh(b)?;
        if dec.lambda_min() <= dec.kernel_threshold() {
            return Err(SmrError::SingularB);
        }
        let bm = b.matrix().clone();
        let chol = nalgebra::Cholesky::new(bm.clone()).ok_or(SmrError::SingularB)?;
        let root = dec.compose(&dec.eigenvalues.map(f64::sqrt)).into_matrix();
        Ok(MeasurementOracle::new(b.n(), Box::new(move |x| &bm * x), ledger)
            .with_binv(Box::new(move |x| Ok(chol.solve(x))))
            .with_sqrt(Box::new(move |x| Ok(&root * x))))
    }

    /// Only the B channel; B may be singular.
    pub fn from_dense_apply_only(b: &DenseSymmetric, ledger: Arc<QueryLedger>) -> Self {
        let bm = b.matrix().clone();
        MeasurementOracle::new(b.n(), Box::new(move |x| &bm * x), ledger)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ledger(&self) -> &Arc<QueryLedger> {
        &self.ledger
    }

    pub fn has_binv(&self) -> bool {
        self.apply_binv.is_some()
    }

    pub fn has_sqrt(&self) -> bool {
        self.apply_sqrt.is_some()
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(SmrError::DimensionMismatch { expected: self.n, got: x.len() });
        }
        Ok(())
    }

    pub fn apply_b(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        self.ledger.record(Channel::B);
        (self.apply_b)(x)
    }

    pub fn apply_binv(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let f = self.apply_binv.as_ref().ok_or(SmrError::MissingChannel("Binv"))?;
        self.ledger.record(Channel::Binv);
        f(x)
    }

    pub fn apply_sqrt(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let f = self.apply_sqrt.as_ref().ok_or(SmrError::MissingChannel("sqrt"))?;
        self.ledger.record(Channel::Sqrt);
        f(x)
    }

    /// B as a dense matrix, from n products with unit vectors.
    pub fn materialize_b(&self) -> Result<DenseSymmetric> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let e = unit(self.n, j);
            m.set_column(j, &self.apply_b(&e)?);
        }
        DenseSymmetric::new(m)
    }

    /// B⁻¹ as a dense matrix, from n inverse products.
    pub fn materialize_binv(&self) -> Result<DenseSymmetric> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let e = unit(self.n, j);
            m.set_column(j, &self.apply_binv(&e)?);
        }
        DenseSymmetric::new(m)
    }

    /// Samples the oracle invariants: linearity, symmetry, inverse and factor
    /// consistency. Every sample is recorded in the ledger.
    pub fn audit(&self, samples: usize, seed: u64) -> Result<OracleAudit> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut audit = OracleAudit::default();
        for _ in 0..samples {
            let x = random_vector(self.n, &mut rng);
            let y = random_vector(self.n, &mut rng);
            let bx = self.apply_b(&x)?;
            let by = self.apply_b(&y)?;
            let bxy = self.apply_b(&(&x + &y))?;
            let scale = bx.norm().max(by.norm()).max(1.0);
            audit.linearity = audit.linearity.max((&bxy - &bx - &by).norm() / scale);
            let sym = (y.dot(&bx) - x.dot(&by)).abs() / (x.norm() * by.norm()).max(1.0);
            audit.symmetry = audit.symmetry.max(sym);
            if self.has_binv() {
                let z = self.apply_binv(&x)?;
                let back = self.apply_b(&z)?;
                audit.inverse = Some(audit.inverse.unwrap_or(0.0).max((&back - &x).norm() / x.norm()));
            }
        }
        if self.has_sqrt() {
            let mut c = DMatrix::zeros(self.n, self.n);
            for j in 0..self.n {
                c.set_column(j, &self.apply_sqrt(&unit(self.n, j))?);
            }
            let b = self.materialize_b()?;
            let cct = &c * c.transpose();
            audit.factor = Some((cct - b.matrix()).amax() / b.max_abs().max(1e-300));
        }
        Ok(audit)
    }
}

/// Largest observed violation of each oracle invariant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleAudit {
    pub linearity: f64,
    pub symmetry: f64,
    pub inverse: Option<f64>,
    pub factor: Option<f64>,
}

pub(crate) fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

pub(crate) fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// One member of a basis family.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisElement {
    Dense(DenseSymmetric),
    /// (e_i − e_j)(e_i − e_j)ᵀ with unit weight.
    EdgeLaplacian(usize, usize),
    /// e_i e_iᵀ.
    DiagonalUnit(usize),
    /// 𝟙𝟙ᵀ.
    AllOnes,
}

impl BasisElement {
    pub fn kind(&self) -> &'static str {
        match self {
            BasisElement::Dense(_) => "dense",
            BasisElement::EdgeLaplacian(..) => "edge_laplacian",
            BasisElement::DiagonalUnit(_) => "diagonal_unit",
            BasisElement::AllOnes => "all_ones",
        }
    }
}

/// A family {M_i} of PSD matrices of common dimension n.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    n: usize,
    elements: Vec<BasisElement>,
}

impl BasisSet {
    pub fn new(n: usize, elements: Vec<BasisElement>) -> Result<Self> {
        if n == 0 {
            return Err(SmrError::ParamOutOfRange("basis dimension must be at least 1".into()));
        }
        if elements.is_empty() {
            return Err(SmrError::ParamOutOfRange("basis must contain at least one element".into()));
        }
        for (k, e) in elements.iter().enumerate() {
            match e {
                BasisElement::Dense(m) => {
                    if m.n() != n {
                        return Err(SmrError::DimensionMismatch { expected: n, got: m.n() });
                    }
                    let dec = eigh(m)?;
                    if dec.lambda_min() < -1e-9 * dec.lambda_max().abs().max(1e-300) {
                        return Err(SmrError::ValidationFailed(format!(
                            "basis element {k} is not PSD (lambda_min = {:e})",
                            dec.lambda_min()
                        )));
                    }
                }
                BasisElement::EdgeLaplacian(i, j) => {
                    if *i >= n || *j >= n || i == j {
                        return Err(SmrError::ValidationFailed(format!("bad edge ({i},{j}) for n = {n}")));
                    }
                }
                BasisElement::DiagonalUnit(i) => {
                    if *i >= n {
                        return Err(SmrError::ValidationFailed(format!("bad diagonal index {i} for n = {n}")));
                    }
                }
                BasisElement::AllOnes => {}
            }
        }
        Ok(BasisSet { n, elements })
    }

    /// All edge Laplacians L_ij, i < j, in lexicographic order.
    pub fn edges(n: usize) -> Vec<BasisElement> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                v.push(BasisElement::EdgeLaplacian(i, j));
            }
        }
        v
    }

    pub fn diagonals(n: usize) -> Vec<BasisElement> {
        (0..n).map(BasisElement::DiagonalUnit).collect()
    }

    pub fn edges_and_diagonals(n: usize) -> Result<Self> {
        let mut v = Self::edges(n);
        v.extend(Self::diagonals(n));
        BasisSet::new(n, v)
    }

    pub fn edges_and_ones(n: usize) -> Result<Self> {
        let mut v = Self::edges(n);
        v.push(BasisElement::AllOnes);
        BasisSet::new(n, v)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[BasisElement] {
        &self.elements
    }

    /// Dense M_i.
    pub fn element_matrix(&self, k: usize) -> DenseSymmetric {
        let n = self.n;
        match &self.elements[k] {
            BasisElement::Dense(m) => m.clone(),
            BasisElement::EdgeLaplacian(i, j) => {
                let mut m = DMatrix::zeros(n, n);
                m[(*i, *i)] = 1.0;
                m[(*j, *j)] = 1.0;
                m[(*i, *j)] = -1.0;
                m[(*j, *i)] = -1.0;
                DenseSymmetric::symmetrize(m)
            }
            BasisElement::DiagonalUnit(i) => {
                let mut m = DMatrix::zeros(n, n);
                m[(*i, *i)] = 1.0;
                DenseSymmetric::symmetrize(m)
            }
            BasisElement::AllOnes => DenseSymmetric::symmetrize(DMatrix::from_element(n, n, 1.0)),
        }
    }

    /// Factor V_i with M_i = V_i V_iᵀ.
    pub fn element_factor(&self, k: usize) -> Result<DMatrix<f64>> {
        let n = self.n;
        Ok(match &self.elements[k] {
            BasisElement::Dense(m) => {
                let dec = eigh(m)?;
                let thr = dec.kernel_threshold();
                let keep: Vec<usize> = (0..n).filter(|&i| dec.eigenvalues[i] > thr).collect();
                let mut v = DMatrix::zeros(n, keep.len().max(1));
                for (c, &i) in keep.iter().enumerate() {
                    v.set_column(c, &(dec.eigenvectors.column(i) * dec.eigenvalues[i].sqrt()));
                }
                v
            }
            BasisElement::EdgeLaplacian(i, j) => {
                let mut v = DMatrix::zeros(n, 1);
                v[(*i, 0)] = 1.0;
                v[(*j, 0)] = -1.0;
                v
            }
            BasisElement::DiagonalUnit(i) => {
                let mut v = DMatrix::zeros(n, 1);
                v[(*i, 0)] = 1.0;
                v
            }
            BasisElement::AllOnes => DMatrix::from_element(n, 1, 1.0),
        })
    }

    /// Σ α_i M_i as a dense matrix (no ledger entry).
    pub fn materialize(&self, alpha: &WeightVector) -> Result<DenseSymmetric> {
        self.check_weights(alpha)?;
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        for (k, e) in self.elements.iter().enumerate() {
            let a = alpha.w[k];
            if a == 0.0 {
                continue;
            }
            match e {
                BasisElement::Dense(d) => m += d.matrix() * a,
                BasisElement::EdgeLaplacian(i, j) => {
                    m[(*i, *i)] += a;
                    m[(*j, *j)] += a;
                    m[(*i, *j)] -= a;
                    m[(*j, *i)] -= a;
                }
                BasisElement::DiagonalUnit(i) => m[(*i, *i)] += a,
                BasisElement::AllOnes => m.add_scalar_mut(a),
            }
        }
        Ok(DenseSymmetric::symmetrize(m))
    }

    fn check_weights(&self, alpha: &WeightVector) -> Result<()> {
        if alpha.len() != self.d() {
            return Err(SmrError::DimensionMismatch { expected: self.d(), got: alpha.len() });
        }
        Ok(())
    }

    fn check_vec(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(SmrError::DimensionMismatch { expected: self.n, got: x.len() });
        }
        Ok(())
    }

    /// Σ α_i M_i x without materializing implicit elements; no ledger entry.
    pub(crate) fn combination_raw(&self, alpha: &WeightVector, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        let sum: f64 = x.iter().sum();
        let mut ones_weight = 0.0;
        for (k, e) in self.elements.iter().enumerate() {
            let a = alpha.w[k];
            if a == 0.0 {
                continue;
            }
            match e {
                BasisElement::Dense(d) => y += d.matrix() * x * a,
                BasisElement::EdgeLaplacian(i, j) => {
                    let t = a * (x[*i] - x[*j]);
                    y[*i] += t;
                    y[*j] -= t;
                }
                BasisElement::DiagonalUnit(i) => y[*i] += a * x[*i],
                BasisElement::AllOnes => ones_weight += a,
            }
        }
        if ones_weight != 0.0 {
            y.add_scalar_mut(ones_weight * sum);
        }
        y
    }

    pub(crate) fn quadratic_forms_raw(&self, x: &DVector<f64>) -> DVector<f64> {
        let sum: f64 = x.iter().sum();
        DVector::from_iterator(
            self.d(),
            self.elements.iter().map(|e| match e {
                BasisElement::Dense(d) => x.dot(&(d.matrix() * x)),
                BasisElement::EdgeLaplacian(i, j) => (x[*i] - x[*j]).powi(2),
                BasisElement::DiagonalUnit(i) => x[*i] * x[*i],
                BasisElement::AllOnes => sum * sum,
            }),
        )
    }
}

/// Nonnegative weights over a basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    w: Vec<f64>,
}

impl WeightVector {
    /// Clamps entries in [−1e−12, 0) to zero and rejects anything lower.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let mut w = w;
        for (i, v) in w.iter_mut().enumerate() {
            if !v.is_finite() || *v < WEIGHT_CLAMP {
                return Err(SmrError::Indefinite { index: i, value: *v });
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(WeightVector { w })
    }

    pub fn zeros(d: usize) -> Self {
        WeightVector { w: vec![0.0; d] }
    }

    pub fn ones(d: usize) -> Self {
        WeightVector { w: vec![1.0; d] }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn scaled(&self, s: f64) -> Self {
        WeightVector { w: self.w.iter().map(|v| v * s.max(0.0)).collect() }
    }

    pub fn plus(&self, o: &WeightVector) -> Self {
        WeightVector { w: self.w.iter().zip(&o.w).map(|(a, b)| a + b).collect() }
    }

    /// (index, weight) pairs for the nonzero entries.
    pub fn sparse_pairs(&self) -> Vec<(usize, f64)> {
        self.w.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect()
    }
}

/// Σ α_i M_i x. Records one MV query.
pub fn apply_combination(
    basis: &BasisSet,
    alpha: &WeightVector,
    x: &DVector<f64>,
    ledger: &QueryLedger,
) -> Result<DVector<f64>> {
    basis.check_weights(alpha)?;
    basis.check_vec(x)?;
    ledger.record(Channel::Mv);
    Ok(basis.combination_raw(alpha, x))
}

/// (xᵀ M_i x)_i. Records one QF query.
pub fn batch_quadratic_forms(basis: &BasisSet, x: &DVector<f64>, ledger: &QueryLedger) -> Result<DVector<f64>> {
    basis.check_vec(x)?;
    ledger.record(Channel::Qf);
    Ok(basis.quadratic_forms_raw(x))
}

/// Solves (Σ α_i M_i) x = b to relative residual `tol`. Records one solve query.
/// Singular combinations are solved on their range when b is consistent.
pub fn combination_solve(
    basis: &BasisSet,
    alpha: &WeightVector,
    b: &DVector<f64>,
    tol: f64,
    ledger: &QueryLedger,
) -> Result<DVector<f64>> {
    basis.check_weights(alpha)?;
    basis.check_vec(b)?;
    if !(tol > 0.0 && tol < 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("solve tolerance {tol} outside (0,1)")));
    }
    ledger.record(Channel::Solve);
    let bn = b.norm();
    if bn == 0.0 {
        return Ok(DVector::zeros(b.len()));
    }
    if basis.n() <= DENSE_SOLVE_MAX_N {
        let m = basis.materialize(alpha)?;
        dense_solve(&m, b, tol)
    } else {
        let apply = |v: &DVector<f64>| basis.combination_raw(alpha, v);
        let diag = basis.combination_diagonal(alpha);
        pcg(&apply, &diag, b, tol, 20 * basis.n())
    }
}

impl BasisSet {
    fn combination_diagonal(&self, alpha: &WeightVector) -> DVector<f64> {
        let mut d = DVector::zeros(self.n);
        for (k, e) in self.elements.iter().enumerate() {
            let a = alpha.w[k];
            match e {
                BasisElement::Dense(m) => {
                    for i in 0..self.n {
                        d[i] += a * m.get(i, i);
                    }
                }
                BasisElement::EdgeLaplacian(i, j) => {
                    d[*i] += a;
                    d[*j] += a;
                }
                BasisElement::DiagonalUnit(i) => d[*i] += a,
                BasisElement::AllOnes => d.add_scalar_mut(a),
            }
        }
        d
    }
}

fn dense_solve(m: &DenseSymmetric, b: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let bn = b.norm();
    if let Some(ch) = nalgebra::Cholesky::new(m.matrix().clone()) {
        let x = ch.solve(b);
        let r = (m.matrix() * &x - b).norm() / bn;
        if r <= tol {
            return Ok(x);
        }
    }
    // singular or badly conditioned: solve on the range, checking consistency
    let dec = eigh(m)?;
    let thr = dec.kernel_threshold();
    let q = &dec.eigenvectors;
    let coeff = q.transpose() * b;
    let mut kernel_part = 0.0;
    let mut y = DVector::zeros(b.len());
    for i in 0..b.len() {
        let l = dec.eigenvalues[i];
        if l <= thr {
            kernel_part += coeff[i] * coeff[i];
        } else {
            y[i] = coeff[i] / l;
        }
    }
    let kernel_part = kernel_part.sqrt() / bn;
    if kernel_part > tol {
        return Err(SmrError::Inconsistent { component: kernel_part, tol });
    }
    Ok(q * y)
}

/// Jacobi-preconditioned conjugate gradients.
pub(crate) fn pcg<F: Fn(&DVector<f64>) -> DVector<f64>>(
    apply: &F,
    diag: &DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    let bn = b.norm();
    let inv = diag.map(|d| if d > 0.0 { 1.0 / d } else { 1.0 });
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut z = r.component_mul(&inv);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 0..max_iters {
        if r.norm() <= tol * bn {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(SmrError::Singular { lambda_min: pap });
        }
        let a = rz / pap;
        x.axpy(a, &p, 1.0);
        r.axpy(-a, &ap, 1.0);
        z = r.component_mul(&inv);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
        if it + 1 == max_iters {
            break;
        }
    }
    if r.norm() <= tol * bn {
        Ok(x)
    } else {
        Err(SmrError::NonConvergence { iterations: max_iters })
    }
}

/// How [`combination_sqrt_apply`] builds its factor.
#[derive(Debug, Clone)]
pub enum SqrtBackend {
    /// Symmetric square root by eigendecomposition.
    Eig,
    /// Polynomial operator from a crude factor Z with α·ZZᵀ ⪯ Σα_iM_i ⪯ ZZᵀ.
    Polynomial { z: DMatrix<f64>, alpha: f64, eps: f64 },
}

/// C·x for a factor with CCᵀ = Σ α_i M_i. Records one root query.
pub fn combination_sqrt_apply(
    basis: &BasisSet,
    alpha: &WeightVector,
    x: &DVector<f64>,
    backend: &SqrtBackend,
    ledger: &QueryLedger,
) -> Result<DVector<f64>> {
    basis.check_weights(alpha)?;
    basis.check_vec(x)?;
    ledger.record(Channel::Root);
    let m = basis.materialize(alpha)?;
    match backend {
        SqrtBackend::Eig => {
            let c = matrix_function(&m, f64::sqrt, KernelPolicy::Reject).map_err(|e| match e {
                SmrError::SingularInput { lambda_min } => SmrError::Singular { lambda_min },
                other => other,
            })?;
            Ok(c.mul_vec(x))
        }
        SqrtBackend::Polynomial { z, alpha: quality, eps } => {
            // C̃C̃ᵀ ≈ M⁻¹ with M = N⁻¹ gives a factor of N itself.
            let chol = nalgebra::Cholesky::new(m.matrix().clone())
                .ok_or(SmrError::Singular { lambda_min: eigh(&m)?.lambda_min() })?;
            let zt = z.transpose();
            let zc = z.clone();
            let op = crate::sqrtpoly::sqrt_operator(
                move |v: &DVector<f64>| chol.solve(v),
                move |v: &DVector<f64>| &zc * v,
                move |v: &DVector<f64>| &zt * v,
                *quality,
                *eps,
            )?;
            op.apply(x)
        }
    }
}

/// Factored PSD family: member i is V_i V_iᵀ, with all factor columns stored
/// side by side. This is the working form of a (possibly whitened) basis.
#[derive(Debug, Clone)]
pub struct TermSet {
    n: usize,
    cols: DMatrix<f64>,
    owner: Vec<usize>,
    d: usize,
}

impl TermSet {
    pub fn from_basis(basis: &BasisSet) -> Result<Self> {
        let mut factors = Vec::with_capacity(basis.d());
        for k in 0..basis.d() {
            factors.push(basis.element_factor(k)?);
        }
        Ok(Self::from_factors(basis.n(), &factors))
    }

    pub fn from_factors(n: usize, factors: &[DMatrix<f64>]) -> Self {
        let total: usize = factors.iter().map(|f| f.ncols()).sum();
        let mut cols = DMatrix::zeros(n, total);
        let mut owner = Vec::with_capacity(total);
        let mut c = 0;
        for (k, f) in factors.iter().enumerate() {
            for j in 0..f.ncols() {
                cols.set_column(c, &f.column(j));
                owner.push(k);
                c += 1;
            }
        }
        TermSet { n, cols, owner, d: factors.len() }
    }

    /// Members as dense matrices.
    pub fn from_dense(n: usize, mats: &[DenseSymmetric]) -> Result<Self> {
        let basis = BasisSet::new(n, mats.iter().cloned().map(BasisElement::Dense).collect())?;
        Self::from_basis(&basis)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// W·V_i for every member: the family W M_i Wᵀ.
    pub fn congruence(&self, w: &DMatrix<f64>) -> Self {
        TermSet { n: w.nrows(), cols: w * &self.cols, owner: self.owner.clone(), d: self.d }
    }

    /// Σ α_i V_i V_iᵀ.
    pub fn combination(&self, alpha: &[f64]) -> DenseSymmetric {
        let mut scaled = self.cols.clone();
        for (c, mut col) in scaled.column_iter_mut().enumerate() {
            col *= alpha[self.owner[c]];
        }
        DenseSymmetric::symmetrize(scaled * self.cols.transpose())
    }

    /// (C • M_i)_i.
    pub fn inner_products(&self, c: &DenseSymmetric) -> Vec<f64> {
        let p = c.matrix() * &self.cols;
        let mut out = vec![0.0; self.d];
        for (k, (a, b)) in self.cols.column_iter().zip(p.column_iter()).enumerate() {
            out[self.owner[k]] += a.dot(&b);
        }
        out
    }

    /// (xᵀ M_i x)_i.
    pub fn quadratic_forms(&self, x: &DVector<f64>) -> Vec<f64> {
        let proj = self.cols.transpose() * x;
        let mut out = vec![0.0; self.d];
        for (k, v) in proj.iter().enumerate() {
            out[self.owner[k]] += v * v;
        }
        out
    }

    /// tr(M_i).
    pub fn traces(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (k, col) in self.cols.column_iter().enumerate() {
            out[self.owner[k]] += col.norm_squared();
        }
        out
    }

    /// V_i.
    pub fn factor(&self, i: usize) -> DMatrix<f64> {
        let idx: Vec<usize> = (0..self.owner.len()).filter(|&c| self.owner[c] == i).collect();
        self.cols.select_columns(idx.iter())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElementSpec {
    EdgeLaplacian { i: usize, j: usize },
    DiagonalUnit { i: usize },
    AllOnes,
    /// Matrix Market file, relative to the manifest.
    Dense { path: String },
}

/// JSON basis manifest. Families ("edges", "diagonals", "ones") expand to all
/// members; explicit elements use 0-based indices.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BasisManifest {
    pub n: usize,
    #[serde(default)]
    pub families: Vec<String>,
    #[serde(default)]
    pub elements: Vec<ElementSpec>,
}

impl BasisManifest {
    pub fn build(&self, base_dir: &Path) -> Result<BasisSet> {
        let n = self.n;
        let mut els = Vec::new();
        for f in &self.families {
            match f.as_str() {
                "edges" => els.extend(BasisSet::edges(n)),
                "diagonals" => els.extend(BasisSet::diagonals(n)),
                "ones" => els.push(BasisElement::AllOnes),
                other => return Err(SmrError::ValidationFailed(format!("unknown basis family '{other}'"))),
            }
        }
        for e in &self.elements {
            els.push(match e {
                ElementSpec::EdgeLaplacian { i, j } => BasisElement::EdgeLaplacian(*i, *j),
                ElementSpec::DiagonalUnit { i } => BasisElement::DiagonalUnit(*i),
                ElementSpec::AllOnes => BasisElement::AllOnes,
                ElementSpec::Dense { path } => {
                    BasisElement::Dense(crate::mmio::read_symmetric(&base_dir.join(path))?)
                }
            });
        }
        BasisSet::new(n, els)
    }

    pub fn load(path: &Path) -> Result<BasisSet> {
        let text = std::fs::read_to_string(path).map_err(|e| SmrError::Io(format!("{}: {}", path.display(), e)))?;
        let m: BasisManifest =
            serde_json::from_str(&text).map_err(|e| SmrError::Parse(format!("{}: {}", path.display(), e)))?;
        m.build(path.parent().unwrap_or(Path::new(".")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::spd_solve;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn dense_basis(n: usize, d: usize, seed: u64) -> BasisSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let els = (0..d)
            .map(|_| {
                let g = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
                BasisElement::Dense(DenseSymmetric::new(&g * g.transpose()).unwrap())
            })
            .collect();
        BasisSet::new(n, els).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn combination_examples() {
        let led = QueryLedger::new();
        let b = BasisSet::new(2, BasisSet::diagonals(2)).unwrap();
        let y = apply_combination(&b, &WeightVector::ones(2), &v(&[3.0, 4.0]), &led).unwrap();
        assert_eq!(y, v(&[3.0, 4.0]));
        let e = BasisSet::new(2, vec![BasisElement::EdgeLaplacian(0, 1)]).unwrap();
        let y = apply_combination(&e, &WeightVector::new(vec![2.0]).unwrap(), &v(&[1.0, 0.0]), &led).unwrap();
        assert_eq!(y, v(&[2.0, -2.0]));
        assert_eq!(led.get(Channel::Mv), 2);
    }

    #[test]
    fn combination_matches_materialized_sum() {
        let led = QueryLedger::new();
        let b = dense_basis(6, 5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = WeightVector::new((0..5).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
        let x = random_vector(6, &mut rng);
        let y = apply_combination(&b, &a, &x, &led).unwrap();
        let mut explicit = DMatrix::zeros(6, 6);
        for k in 0..5 {
            explicit += b.element_matrix(k).matrix() * a.as_slice()[k];
        }
        assert!((y - explicit * x).amax() <= 1e-10);
    }

    #[test]
    fn quadratic_form_examples() {
        let led = QueryLedger::new();
        let e = BasisSet::new(2, vec![BasisElement::EdgeLaplacian(0, 1)]).unwrap();
        assert_eq!(batch_quadratic_forms(&e, &v(&[1.0, 0.0]), &led).unwrap(), v(&[1.0]));
        let o = BasisSet::new(3, vec![BasisElement::AllOnes]).unwrap();
        assert_eq!(batch_quadratic_forms(&o, &v(&[1.0, 1.0, 1.0]), &led).unwrap(), v(&[9.0]));
        let b = dense_basis(5, 4, 2);
        let x = v(&[0.3, -1.0, 0.5, 2.0, 0.1]);
        let q = batch_quadratic_forms(&b, &x, &led).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(q[k], x.dot(&(b.element_matrix(k).matrix() * &x)), epsilon = 1e-10);
        }
        assert_eq!(led.get(Channel::Qf), 3);
    }

    #[test]
    fn solve_examples() {
        let led = QueryLedger::new();
        let b = BasisSet::new(2, BasisSet::diagonals(2)).unwrap();
        let x = combination_solve(&b, &WeightVector::ones(2), &v(&[2.0, 3.0]), 1e-12, &led).unwrap();
        assert_abs_diff_eq!(x, v(&[2.0, 3.0]), epsilon = 1e-14);
        let s = BasisSet::new(
            2,
            vec![BasisElement::EdgeLaplacian(0, 1), BasisElement::DiagonalUnit(0), BasisElement::DiagonalUnit(1)],
        )
        .unwrap();
        let w = WeightVector::new(vec![2.0, 1.0, 1.0]).unwrap();
        let x = combination_solve(&s, &w, &v(&[1.0, 0.0]), 1e-12, &led).unwrap();
        assert_abs_diff_eq!(x, v(&[0.6, 0.4]), epsilon = 1e-13);
        assert_eq!(led.get(Channel::Solve), 2);
    }

    #[test]
    fn solve_random_sddm_and_singular_cases() {
        let led = QueryLedger::new();
        let n = 8;
        let basis = BasisSet::edges_and_diagonals(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..basis.d()).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = WeightVector::new(w).unwrap();
        let b = random_vector(n, &mut rng);
        let x = combination_solve(&basis, &w, &b, 1e-12, &led).unwrap();
        let m = basis.materialize(&w).unwrap();
        assert!((m.matrix() * &x - &b).norm() / b.norm() <= 1e-10);
        let oracle = spd_solve(&m, &b).unwrap();
        assert!((x - oracle).amax() <= 1e-9);

        // Laplacian only: consistent b solves, kernel b is rejected
        let lap = BasisSet::new(3, BasisSet::edges(3)).unwrap();
        let ones = WeightVector::ones(3);
        assert!(combination_solve(&lap, &ones, &v(&[1.0, 0.0, -1.0]), 1e-10, &led).is_ok());
        assert!(matches!(
            combination_solve(&lap, &ones, &v(&[1.0, 1.0, 1.0]), 1e-10, &led),
            Err(SmrError::Inconsistent { .. })
        ));
    }

    #[test]
    fn pcg_path_for_large_n() {
        let led = QueryLedger::new();
        let n = 140;
        let mut els = Vec::new();
        for i in 0..n - 1 {
            els.push(BasisElement::EdgeLaplacian(i, i + 1));
        }
        els.extend(BasisSet::diagonals(n));
        let basis = BasisSet::new(n, els).unwrap();
        let w = WeightVector::ones(basis.d());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_vector(n, &mut rng);
        let x = combination_solve(&basis, &w, &b, 1e-10, &led).unwrap();
        let r = basis.combination_raw(&w, &x) - &b;
        assert!(r.norm() <= 1e-10 * b.norm());
    }

    #[test]
    fn negative_weights_are_rejected_or_clamped() {
        assert_eq!(WeightVector::new(vec![-5e-13]).unwrap().as_slice(), &[0.0]);
        assert!(matches!(WeightVector::new(vec![1.0, -1e-6]), Err(SmrError::Indefinite { index: 1, .. })));
    }

    #[test]
    fn sqrt_examples() {
        let led = QueryLedger::new();
        let b = BasisSet::new(2, BasisSet::diagonals(2)).unwrap();
        let w = WeightVector::new(vec![4.0, 4.0]).unwrap();
        let y = combination_sqrt_apply(&b, &w, &v(&[1.0, 1.0]), &SqrtBackend::Eig, &led).unwrap();
        assert_abs_diff_eq!(y, v(&[2.0, 2.0]), epsilon = 1e-12);
        let w = WeightVector::new(vec![1.0, 4.0]).unwrap();
        // Cᵀe_1 for symmetric C is C e_1
        let c1 = combination_sqrt_apply(&b, &w, &v(&[1.0, 0.0]), &SqrtBackend::Eig, &led).unwrap();
        assert_abs_diff_eq!(c1.norm_squared(), 1.0, epsilon = 1e-12);
        assert_eq!(led.get(Channel::Root), 2);
        let singular = WeightVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            combination_sqrt_apply(&b, &singular, &v(&[1.0, 0.0]), &SqrtBackend::Eig, &led),
            Err(SmrError::Singular { .. })
        ));
    }

    #[test]
    fn sqrt_random_sddm_quadratic_forms() {
        let led = QueryLedger::new();
        let n = 6;
        let basis = BasisSet::edges_and_diagonals(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = WeightVector::new((0..basis.d()).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
        let m = basis.materialize(&w).unwrap();
        let mut c = DMatrix::zeros(n, n);
        for j in 0..n {
            c.set_column(j, &combination_sqrt_apply(&basis, &w, &unit(n, j), &SqrtBackend::Eig, &led).unwrap());
        }
        for _ in 0..20 {
            let x = random_vector(n, &mut rng);
            let lhs = (c.transpose() * &x).norm_squared();
            let rhs = x.dot(&(m.matrix() * &x));
            assert!((lhs - rhs).abs() <= 1e-6 * rhs);
        }
    }

    #[test]
    fn polynomial_sqrt_backend() {
        let led = QueryLedger::new();
        let basis = BasisSet::edges_and_diagonals(4).unwrap();
        let w = WeightVector::ones(basis.d());
        let m = basis.materialize(&w).unwrap();
        // crude factor: Z = sqrt(λmax)·I gives α = λmin/λmax
        let (lo, hi) = crate::matcore::extreme_eigs(&m).unwrap();
        let z = DMatrix::identity(4, 4) * hi.sqrt();
        let be = SqrtBackend::Polynomial { z, alpha: lo / hi, eps: 0.01 };
        let mut c = DMatrix::zeros(4, 4);
        for j in 0..4 {
            c.set_column(j, &combination_sqrt_apply(&basis, &w, &unit(4, j), &be, &led).unwrap());
        }
        let cct = DenseSymmetric::new(&c * c.transpose()).unwrap();
        let cert = crate::matcore::loewner_sandwich(&cct, &m, (-0.01f64).exp(), 0.01f64.exp(), 1e-9).unwrap();
        assert!(cert.holds, "{cert:?}");
    }

    #[test]
    fn oracle_channels_and_audit() {
        let b = DenseSymmetric::from_row_slice(2, &[2.0, 1.0, 1.0, 3.0]).unwrap();
        let led = QueryLedger::new();
        let o = MeasurementOracle::from_dense(&b, led.clone()).unwrap();
        let before = led.snapshot();
        let x = v(&[1.0, 2.0]);
        let y = o.apply_binv(&o.apply_b(&x).unwrap()).unwrap();
        assert_abs_diff_eq!(y, x, epsilon = 1e-12);
        let d = led.snapshot().diff(&before);
        assert_eq!((d.b, d.binv, d.total()), (1, 1, 2));
        let audit = o.audit(10, 3).unwrap();
        assert!(audit.linearity <= 1e-9 && audit.symmetry <= 1e-9);
        assert!(audit.inverse.unwrap() <= 1e-7 && audit.factor.unwrap() <= 1e-7);
        let only = MeasurementOracle::from_dense_apply_only(&b, led.clone());
        assert_eq!(only.apply_binv(&x), Err(SmrError::MissingChannel("Binv")));
        assert!(o.apply_b(&v(&[1.0])).is_err());
    }

    #[test]
    fn manifest_families_and_elements() {
        let m: BasisManifest = serde_json::from_str(
            r#"{"n":3,"families":["edges"],"elements":[{"kind":"diagonal_unit","i":2},{"kind":"all_ones"}]}"#,
        )
        .unwrap();
        let b = m.build(Path::new(".")).unwrap();
        assert_eq!(b.d(), 5);
        assert_eq!(b.elements()[3], BasisElement::DiagonalUnit(2));
        let bad: BasisManifest = serde_json::from_str(r#"{"n":3,"families":["cliques"]}"#).unwrap();
        assert!(bad.build(Path::new(".")).is_err());
        assert!(BasisSet::new(2, vec![BasisElement::EdgeLaplacian(0, 2)]).is_err());
        let neg = DenseSymmetric::from_diagonal(&[1.0, -1.0]);
        assert!(BasisSet::new(2, vec![BasisElement::Dense(neg)]).is_err());
    }

    #[test]
    fn term_set_agrees_with_basis() {
        let basis = BasisSet::edges_and_ones(4).unwrap();
        let t = TermSet::from_basis(&basis).unwrap();
        let w: Vec<f64> = (0..basis.d()).map(|k| 0.1 * (k + 1) as f64).collect();
        let m = basis.materialize(&WeightVector::new(w.clone()).unwrap()).unwrap();
        assert!((t.combination(&w).matrix() - m.matrix()).amax() <= 1e-13);
        let c = DenseSymmetric::from_diagonal(&[1.0, 2.0, 3.0, 4.0]);
        let ip = t.inner_products(&c);
        for k in 0..basis.d() {
            let direct = (c.matrix() * basis.element_matrix(k).matrix()).trace();
            assert_abs_diff_eq!(ip[k], direct, epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ledger_counts_one_per_call(calls in proptest::collection::vec(0u8..4, 1..30)) {
            let led = QueryLedger::new();
            let basis = BasisSet::edges_and_diagonals(3).unwrap();
            let w = WeightVector::ones(basis.d());
            let x = v(&[1.0, -2.0, 0.5]);
            let mut phases = Vec::new();
            let mut last = led.snapshot();
            for c in &calls {
                match c {
                    0 => { apply_combination(&basis, &w, &x, &led).unwrap(); }
                    1 => { batch_quadratic_forms(&basis, &x, &led).unwrap(); }
                    2 => { combination_solve(&basis, &w, &x, 1e-10, &led).unwrap(); }
                    _ => { combination_sqrt_apply(&basis, &w, &x, &SqrtBackend::Eig, &led).unwrap(); }
                }
                let now = led.snapshot();
                let d = now.diff(&last);
                prop_assert_eq!(d.total(), 1);
                phases.push(d);
                last = now;
            }
            let sum = phases.iter().fold(LedgerSnapshot::default(), |a, d| a.add(d));
            prop_assert_eq!(sum, led.snapshot());
        }

        #[test]
        fn quadratic_forms_nonnegative(seed in 0u64..500) {
            let led = QueryLedger::new();
            let basis = BasisSet::edges_and_ones(5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_vector(5, &mut rng);
            let q = batch_quadratic_forms(&basis, &x, &led).unwrap();
            prop_assert!(q.iter().all(|&v| v >= -1e-10 * x.norm_squared()));
        }

        #[test]
        fn outputs_deterministic(seed in 0u64..200) {
            let led = QueryLedger::new();
            let basis = dense_basis(4, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_vector(4, &mut rng);
            let w = WeightVector::ones(3);
            let a = apply_combination(&basis, &w, &x, &led).unwrap();
            let b = apply_combination(&basis, &w, &x, &led).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
