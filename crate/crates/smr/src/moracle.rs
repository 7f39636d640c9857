//! The modified one-sided oracle: gain vectors (exact or sketched), a packing
//! SDP solver with two backends, and the certified per-call driver.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::barrier::{barrier_floor, lower_gap, psi_dec, upper_gap, BarrierState};
use crate::error::{Result, SmrError};
use crate::matcore::{eigh, DenseSymmetric, SpectralDecomposition};
use crate::oracles::{
    apply_combination, batch_quadratic_forms, BasisSet, LedgerSnapshot, MeasurementOracle, TermSet, WeightVector,
};
use crate::sqrtpoly::{finv_exp_taylor_adaptive, TaylorPoly};

/// Oracle speed used for barrier steps and the Condition-2 target.
pub const SPEED: f64 = 0.5;
/// Relative tolerance on Condition 1.
pub const COND1_TOL: f64 = 1e-8;
/// Default JL constant.
pub const C_JL: f64 = 8.0;

/// Inputs of one oracle call: C₊ = (1−2ε)Ψ(γ⁻¹A − lI), C₋ = (1+2ε)Ψ(uI − A), cap k.
#[derive(Debug, Clone)]
pub struct OracleCall {
    pub k: f64,
    pub eps: f64,
    pub gamma: f64,
    pub u: f64,
    pub l: f64,
    pub cplus: DenseSymmetric,
    pub cminus: DenseSymmetric,
    /// Spectrum range of uI − A.
    pub upper_range: (f64, f64),
    /// Spectrum range of γ⁻¹A − lI.
    pub lower_range: (f64, f64),
}

impl OracleCall {
    pub fn from_state(st: &BarrierState) -> Result<Self> {
        let up = eigh(&upper_gap(&st.a, st.u))?;
        let lo = eigh(&lower_gap(&st.a, st.l, st.gamma))?;
        Self::from_decompositions(st, &up, &lo)
    }

    pub fn from_decompositions(
        st: &BarrierState,
        up: &SpectralDecomposition,
        lo: &SpectralDecomposition,
    ) -> Result<Self> {
        let e = st.eps;
        let map = |err: SmrError| match err {
            SmrError::SingularInput { lambda_min } => {
                SmrError::BarrierViolation(format!("barrier gap not positive ({lambda_min:e})"))
            }
            other => other,
        };
        Ok(OracleCall {
            k: st.gamma * barrier_floor(st.n()).powi(2),
            eps: e,
            gamma: st.gamma,
            u: st.u,
            l: st.l,
            cplus: psi_dec(lo).map_err(map)?.scale(1.0 - 2.0 * e),
            cminus: psi_dec(up).map_err(map)?.scale(1.0 + 2.0 * e),
            upper_range: (up.lambda_min(), up.lambda_max()),
            lower_range: (lo.lambda_min(), lo.lambda_max()),
        })
    }

    /// ρ = ε/4.
    pub fn rho(&self) -> f64 {
        self.eps / 4.0
    }

    /// S·k·[(1−ε)tr C₊ − (1+ε)tr C₋].
    pub fn target(&self, s: f64) -> f64 {
        s * self.k * ((1.0 - self.eps) * self.cplus.trace() - (1.0 + self.eps) * self.cminus.trace())
    }
}

/// c_i ≈ C₊ • M_i and d_i ≈ C₋ • M_i in whitened coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainVectors {
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub rho: f64,
}

/// A basis whitened by B^{−1/2}, kept alongside the raw family.
#[derive(Debug, Clone)]
pub struct WhitenedBasis {
    pub raw: BasisSet,
    pub terms: TermSet,
    /// B^{−1/2} as formed from the oracle.
    pub whitener: DMatrix<f64>,
    pub identity: bool,
}

impl WhitenedBasis {
    /// Identity whitening (B = I).
    pub fn identity(raw: &BasisSet) -> Result<Self> {
        Ok(WhitenedBasis {
            raw: raw.clone(),
            terms: TermSet::from_basis(raw)?,
            whitener: DMatrix::identity(raw.n(), raw.n()),
            identity: true,
        })
    }
}

/// Forms B^{−1/2} from n inverse queries (or n forward queries when no inverse
/// channel exists) and whitens the basis factors.
pub fn whiten(raw: &BasisSet, oracle: &MeasurementOracle) -> Result<WhitenedBasis> {
    if oracle.n() != raw.n() {
        return Err(SmrError::DimensionMismatch { expected: raw.n(), got: oracle.n() });
    }
    let n = raw.n();
    let (m, inverse) = if oracle.has_binv() {
        (oracle.materialize_binv()?, true)
    } else {
        (oracle.materialize_b()?, false)
    };
    if m.matrix() == &DMatrix::<f64>::identity(n, n) {
        return WhitenedBasis::identity(raw);
    }
    let dec = eigh(&m)?;
    if dec.lambda_min() <= dec.kernel_threshold() {
        return Err(SmrError::SingularWhitening);
    }
    let w = if inverse {
        dec.compose(&dec.eigenvalues.map(f64::sqrt))
    } else {
        dec.compose(&dec.eigenvalues.map(|l| 1.0 / l.sqrt()))
    };
    let whitener = w.into_matrix();
    Ok(WhitenedBasis { raw: raw.clone(), terms: TermSet::from_basis(raw)?.congruence(&whitener), whitener, identity: false })
}

/// Dense gains on a whitened term set.
pub fn exact_gains(call: &OracleCall, terms: &TermSet) -> GainVectors {
    GainVectors { c: terms.inner_products(&call.cplus), d: terms.inner_products(&call.cminus), rho: 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub rho: f64,
    pub rows: usize,
    pub seed: u64,
    pub degree_cap: usize,
    pub c_jl: f64,
}

impl SketchConfig {
    /// ceil(c_jl·ln(max(n,d,2))/ρ²).
    pub fn required_rows(n: usize, d: usize, rho: f64, c_jl: f64) -> usize {
        (c_jl * (n.max(d).max(2) as f64).ln() / (rho * rho)).ceil() as usize
    }

    pub fn for_problem(n: usize, d: usize, rho: f64, seed: u64) -> Self {
        SketchConfig { rho, rows: Self::required_rows(n, d, rho, C_JL), seed, degree_cap: 4096, c_jl: C_JL }
    }
}

/// What a sketched gains call consumed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchReport {
    pub rows: usize,
    pub degree_upper: usize,
    pub degree_lower: usize,
    pub ledger_diff: LedgerSnapshot,
}

/// Raw-coordinate context for the sketch: the raw basis, oracle access to B
/// and the accumulated weights (A = B^{−1/2}·Σacc_i M′_i·B^{−1/2}).
pub struct SketchContext<'a> {
    pub raw: &'a BasisSet,
    pub oracle: &'a MeasurementOracle<'a>,
    pub accumulated: &'a WeightVector,
}

/// Gains estimated from Gaussian sketch vectors. With Ψ(E) = 4·f(2E)² and
/// f(x) = x⁻¹·exp(1/x), B^{−1/2}·p(2E)·q = p(K)·B^{−1/2}q where
/// K = 2uI − 2B⁻¹M̂ (upper side) or 2γ⁻¹B⁻¹M̂ − 2lI (lower side), and
/// B⁻¹C·g has the law of B^{−1/2}g. Every product is a ledger-counted
/// oracle call; entries are read off as quadratic forms.
pub fn sketched_gains(call: &OracleCall, ctx: &SketchContext<'_>, cfg: &SketchConfig) -> Result<(GainVectors, SketchReport)> {
    let n = ctx.raw.n();
    let d = ctx.raw.d();
    if !(cfg.rho > 0.0 && cfg.rho < 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("sketch rho {} outside (0,1)", cfg.rho)));
    }
    let required = SketchConfig::required_rows(n, d, cfg.rho, cfg.c_jl);
    if cfg.rows < required || cfg.rows == 0 {
        return Err(SmrError::SketchDeficient { rows: cfg.rows, required });
    }
    let ledger = ctx.oracle.ledger().clone();
    let before = ledger.snapshot();
    // f² within 1±ρ needs f within 1±ρ/3
    let taylor = |range: (f64, f64)| -> Result<TaylorPoly> {
        let (lo, hi) = (2.0 * range.0, 2.0 * range.1);
        finv_exp_taylor_adaptive(hi.max(lo * (1.0 + 1e-9)), lo, cfg.rho / 3.0, cfg.degree_cap)
    };
    let pu = taylor(call.upper_range)?;
    let pl = taylor(call.lower_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut c = DVector::zeros(d);
    let mut dv = DVector::zeros(d);
    let (u, l, gamma) = (call.u, call.l, call.gamma);
    let mhat = |y: &DVector<f64>| apply_combination(ctx.raw, ctx.accumulated, y, &ledger);
    for _ in 0..cfg.rows {
        let g = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let start = ctx.oracle.apply_binv(&ctx.oracle.apply_sqrt(&g)?)?;
        let yu = pu.apply(|y| Ok(y * (2.0 * u) - ctx.oracle.apply_binv(&mhat(y)?)? * 2.0), &start)?;
        dv += batch_quadratic_forms(ctx.raw, &yu, &ledger)?;
        let start = ctx.oracle.apply_binv(&ctx.oracle.apply_sqrt(&g)?)?;
        let yl = pl.apply(|y| Ok(ctx.oracle.apply_binv(&mhat(y)?)? * (2.0 / gamma) - y * (2.0 * l)), &start)?;
        c += batch_quadratic_forms(ctx.raw, &yl, &ledger)?;
    }
    let r = cfg.rows as f64;
    let gains = GainVectors {
        c: c.iter().map(|v| 4.0 * (1.0 - 2.0 * call.eps) * v / r).collect(),
        d: dv.iter().map(|v| 4.0 * (1.0 + 2.0 * call.eps) * v / r).collect(),
        rho: cfg.rho,
    };
    let report = SketchReport {
        rows: cfg.rows,
        degree_upper: pu.degree(),
        degree_lower: pl.degree(),
        ledger_diff: ledger.snapshot().diff(&before),
    };
    Ok((gains, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpBackend {
    /// Matrix multiplicative weights with a dual-bound stopping rule.
    Mwu,
    /// Log-barrier interior point method.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpReport {
    pub objective: f64,
    /// Certified upper bound on the optimum (reference: duality gap; mwu: dual witness).
    pub upper_bound: f64,
    pub lambda_max: f64,
    pub iterations: usize,
    /// Factor of the final feasibility rescale.
    pub rescale: f64,
}

/// Optional inputs for [`packing_sdp_solve`].
#[derive(Debug, Clone, Default)]
pub struct SdpOptions {
    pub warm_start: Option<Vec<f64>>,
    /// Stop as soon as the rescaled objective reaches this value.
    pub stop_at: Option<f64>,
}

/// max cᵀx subject to Σx_iM_i ⪯ cap·I, x ≥ 0. Coordinates with c_i ≤ 0 are
/// fixed at zero. The output is always feasible: it is scaled by
/// min(1, cap/λ_max(Σx_iM_i)) before returning.
pub fn packing_sdp_solve(
    c_obj: &[f64],
    terms: &TermSet,
    cap: f64,
    delta: f64,
    backend: SdpBackend,
    opts: &SdpOptions,
) -> Result<(WeightVector, SdpReport)> {
    if c_obj.len() != terms.d() {
        return Err(SmrError::DimensionMismatch { expected: terms.d(), got: c_obj.len() });
    }
    if !(cap > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(SmrError::ParamOutOfRange(format!("cap {cap} and delta {delta} must be positive, delta < 1")));
    }
    let sub = ActiveProblem::new(c_obj, terms, cap)?;
    let zero = SdpReport { objective: 0.0, upper_bound: 0.0, lambda_max: 0.0, iterations: 0, rescale: 1.0 };
    if sub.m == 0 {
        return Ok((WeightVector::zeros(terms.d()), zero));
    }
    let (x, ub, iters) = match backend {
        SdpBackend::Reference => sub.interior_point(delta)?,
        SdpBackend::Mwu => sub.mwu(delta, opts)?,
    };
    // final feasibility rescale
    let mut full = vec![0.0; terms.d()];
    for (k, &i) in sub.active.iter().enumerate() {
        full[i] = x[k];
    }
    let lmax = eigh(&terms.combination(&full))?.lambda_max();
    let scale = if lmax > cap { cap / lmax } else { 1.0 };
    for v in full.iter_mut() {
        *v *= scale;
    }
    let objective: f64 = full.iter().zip(c_obj).map(|(x, c)| x * c).sum();
    let report = SdpReport { objective, upper_bound: ub, lambda_max: lmax * scale, iterations: iters, rescale: scale };
    Ok((WeightVector::new(full)?, report))
}

/// The packing problem restricted to coordinates with positive objective,
/// normalized to Σx_iA_i ⪯ I with A_i = M_i/cap.
struct ActiveProblem {
    n: usize,
    m: usize,
    active: Vec<usize>,
    g: Vec<f64>,
    /// Factor columns of the active terms divided by √cap.
    cols: DMatrix<f64>,
    owner: Vec<usize>,
    lam: Vec<f64>,
}

impl ActiveProblem {
    fn new(c_obj: &[f64], terms: &TermSet, cap: f64) -> Result<Self> {
        let traces = terms.traces();
        let active: Vec<usize> = (0..terms.d()).filter(|&i| c_obj[i] > 0.0 && traces[i] > 0.0).collect();
        let n = terms.n();
        let mut factors = Vec::with_capacity(active.len());
        let mut lam = Vec::with_capacity(active.len());
        for &i in &active {
            let f = terms.factor(i) / cap.sqrt();
            let gram = DenseSymmetric::symmetrize(f.transpose() * &f);
            lam.push(eigh(&gram)?.lambda_max());
            factors.push(f);
        }
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
        Ok(ActiveProblem { n, m: active.len(), g: active.iter().map(|&i| c_obj[i]).collect(), active, cols, owner, lam })
    }

    fn combination(&self, x: &[f64]) -> DMatrix<f64> {
        let mut scaled = self.cols.clone();
        for (c, mut col) in scaled.column_iter_mut().enumerate() {
            col *= x[self.owner[c]];
        }
        scaled * self.cols.transpose()
    }

    /// A_i • Y for all active i.
    fn inner(&self, y: &DMatrix<f64>) -> Vec<f64> {
        let p = y * &self.cols;
        let mut out = vec![0.0; self.m];
        for (c, (a, b)) in self.cols.column_iter().zip(p.column_iter()).enumerate() {
            out[self.owner[c]] += a.dot(&b);
        }
        out
    }

    fn slack_inverse(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let s = DMatrix::identity(self.n, self.n) - self.combination(x);
        nalgebra::Cholesky::new(s).map(|ch| ch.inverse())
    }

    fn barrier_value(&self, x: &[f64], mu: f64) -> Option<f64> {
        if x.iter().any(|&v| v <= 0.0) {
            return None;
        }
        let s = DMatrix::identity(self.n, self.n) - self.combination(x);
        let ch = nalgebra::Cholesky::new(s)?;
        let logdet: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let obj: f64 = x.iter().zip(&self.g).map(|(a, b)| a * b).sum();
        Some(obj / mu + x.iter().map(|v| v.ln()).sum::<f64>() + logdet)
    }

    /// Path-following on gᵀx/μ + Σ ln x_i + ln det(I − Σx_iA_i) with damped
    /// Newton steps. Returns (x, gap-based upper bound, newton steps).
    fn interior_point(&self, delta: f64) -> Result<(Vec<f64>, f64, usize)> {
        let m = self.m;
        let mut x: Vec<f64> = self.lam.iter().map(|l| 0.5 / (m as f64 * l)).collect();
        let obj = |x: &[f64]| -> f64 { x.iter().zip(&self.g).map(|(a, b)| a * b).sum() };
        let nu = (m + self.n) as f64;
        let mut mu = obj(&x) / nu;
        let mut steps = 0;
        let tol = (delta * 1e-2).max(1e-9);
        for _outer in 0..200 {
            for _ in 0..100 {
                let sinv = self.slack_inverse(&x).ok_or_else(|| SmrError::OracleFailure("interior point left the feasible set".into()))?;
                let gmat = self.cols.transpose() * &sinv * &self.cols;
                let mut grad = DVector::<f64>::zeros(m);
                let mut hess = DMatrix::<f64>::zeros(m, m);
                for a in 0..self.cols.ncols() {
                    let oa = self.owner[a];
                    grad[oa] -= gmat[(a, a)];
                    for b in 0..self.cols.ncols() {
                        hess[(oa, self.owner[b])] += gmat[(a, b)] * gmat[(a, b)];
                    }
                }
                for i in 0..m {
                    grad[i] += self.g[i] / mu + 1.0 / x[i];
                    hess[(i, i)] += 1.0 / (x[i] * x[i]);
                }
                let ch = nalgebra::Cholesky::new(hess)
                    .ok_or_else(|| SmrError::OracleFailure("interior point Hessian not positive definite".into()))?;
                let dir = ch.solve(&grad);
                let dec2 = grad.dot(&dir).max(0.0);
                steps += 1;
                if dec2 < 1e-10 {
                    break;
                }
                let mut t = if dec2.sqrt() < 0.25 { 1.0 } else { 1.0 / (1.0 + dec2.sqrt()) };
                let f0 = self.barrier_value(&x, mu).unwrap_or(f64::NEG_INFINITY);
                loop {
                    let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
                    if let Some(f1) = self.barrier_value(&trial, mu) {
                        if f1 >= f0 - 1e-12 * f0.abs() {
                            x = trial;
                            break;
                        }
                    }
                    t *= 0.5;
                    if t < 1e-12 {
                        break;
                    }
                }
                if dec2 < 1e-3 {
                    break;
                }
            }
            let val = obj(&x);
            if nu * mu <= tol * val {
                return Ok((x, val + nu * mu, steps));
            }
            mu *= 0.2;
        }
        let val = obj(&x);
        Ok((x, val + nu * mu, steps))
    }

    /// Multiplicative weights on y_i = g_i·x_i against P = exp(L(Σx_iA_i − I)).
    /// P / min_i(A_i•P/g_i) is dual feasible, which gives the stopping bound.
    fn mwu(&self, delta: f64, opts: &SdpOptions) -> Result<(Vec<f64>, f64, usize)> {
        let m = self.m;
        let dims = (self.n * m) as f64;
        let log_term = (dims / delta).ln().max(1.0);
        let big_l = 4.0 / delta * log_term;
        let cap_iters = (10.0 / delta.powi(3) * log_term).ceil() as usize;
        let step = 0.5 / big_l.sqrt().max(1.0);
        let mut x: Vec<f64> = match &opts.warm_start {
            Some(w) => self.active.iter().map(|&i| w.get(i).copied().unwrap_or(0.0)).collect(),
            None => vec![0.0; m],
        };
        let seed_floor: Vec<f64> = self.lam.iter().map(|l| 0.1 / (m as f64 * l)).collect();
        for (v, f) in x.iter_mut().zip(&seed_floor) {
            if *v <= 0.0 {
                *v = *f;
            }
        }
        let mut best_x = vec![0.0; m];
        let mut best_val = 0.0;
        let mut best_ub = f64::INFINITY;
        let mut iters = 0;
        for it in 0..cap_iters {
            iters = it + 1;
            let psi = DenseSymmetric::symmetrize(self.combination(&x));
            let dec = eigh(&psi)?;
            let lmax = dec.lambda_max().max(1e-300);
            let scale = (1.0 / lmax).min(1.0);
            let val: f64 = x.iter().zip(&self.g).map(|(a, b)| a * b).sum::<f64>() * scale;
            if val > best_val {
                best_val = val;
                best_x = x.iter().map(|v| v * scale).collect();
            }
            // P normalized by its top eigenvalue to avoid overflow; the dual bound is scale-free
            let p = dec.compose(&dec.eigenvalues.map(|l| (big_l * (l - lmax)).exp()));
            let v = self.inner(p.matrix());
            let ratio_min = v.iter().zip(&self.g).map(|(vi, gi)| vi / gi).fold(f64::INFINITY, f64::min);
            if ratio_min > 0.0 {
                best_ub = best_ub.min(p.trace() / ratio_min);
            }
            if best_val >= (1.0 - delta) * best_ub {
                break;
            }
            if let Some(s) = opts.stop_at {
                if best_val >= s {
                    break;
                }
            }
            // gradient of gᵀx − tr exp(L(Ψ − I))/L in value units: 1 − (A_i•P̃)/g_i,
            // with P̃ = exp(L(Ψ − I)) = e^{L(λmax − 1)}·p
            let shift = (big_l * (lmax - 1.0)).exp();
            for i in 0..m {
                let gr = 1.0 - shift * v[i] / self.g[i];
                x[i] *= (step * gr.clamp(-1.0, 1.0)).exp();
            }
        }
        Ok((best_x, best_ub, iters))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainBackend {
    Exact,
    Sketch { rho: f64, c_jl: f64, degree_cap: usize },
}

impl GainBackend {
    /// Sketched gains at accuracy `rho` with the default row constant.
    pub fn sketch(rho: f64) -> Self {
        GainBackend::Sketch { rho, c_jl: C_JL, degree_cap: 4096 }
    }
}

/// Per-call certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCertificate {
    pub k: f64,
    pub eps: f64,
    #[serde(rename = "S_target")]
    pub s_target: f64,
    pub cond1_lambda_max: f64,
    pub cond2_lhs: f64,
    pub cond2_rhs: f64,
    pub slack: f64,
    pub backend: String,
    pub seed: u64,
    pub ledger_diff: LedgerSnapshot,
}

impl OracleCertificate {
    pub fn cond1_holds(&self) -> bool {
        self.cond1_lambda_max <= self.k * (1.0 + COND1_TOL)
    }

    pub fn cond2_holds(&self) -> bool {
        self.slack >= 0.0
    }
}

/// Left and right sides of Condition 2 for weights α (exact gains).
pub fn condition_two(call: &OracleCall, gains: &GainVectors, alpha: &[f64], s: f64) -> (f64, f64) {
    let lhs: f64 = alpha.iter().enumerate().map(|(i, a)| a * (gains.c[i] / call.gamma - gains.d[i])).sum();
    (lhs, call.target(s))
}

/// Stateful oracle driver: warm starts across calls and keeps the seed stream.
#[derive(Debug, Clone)]
pub struct MOracle {
    pub gains: GainBackend,
    pub sdp: SdpBackend,
    pub seed: u64,
    pub speed: f64,
    warm: Option<Vec<f64>>,
    calls: u64,
    pub resolves: u64,
}

impl MOracle {
    pub fn new(gains: GainBackend, sdp: SdpBackend, seed: u64) -> Self {
        MOracle { gains, sdp, seed, speed: SPEED, warm: None, calls: 0, resolves: 0 }
    }

    fn backend_name(&self) -> String {
        let g = match self.gains {
            GainBackend::Exact => "exact",
            GainBackend::Sketch { .. } => "sketch",
        };
        let s = match self.sdp {
            SdpBackend::Mwu => "mwu",
            SdpBackend::Reference => "reference",
        };
        format!("{g}+{s}")
    }

    fn certify(&self, call: &OracleCall, exact: &GainVectors, terms: &TermSet, alpha: &[f64], seed: u64) -> Result<OracleCertificate> {
        let lmax = if alpha.iter().all(|&a| a == 0.0) { 0.0 } else { eigh(&terms.combination(alpha))?.lambda_max() };
        let (lhs, rhs) = condition_two(call, exact, alpha, self.speed);
        Ok(OracleCertificate {
            k: call.k,
            eps: call.eps,
            s_target: self.speed,
            cond1_lambda_max: lmax,
            cond2_lhs: lhs,
            cond2_rhs: rhs,
            slack: lhs - rhs,
            backend: self.backend_name(),
            seed,
            ledger_diff: LedgerSnapshot::default(),
        })
    }

    /// Weights α ≥ 0 with Σα_iM_i ⪯ kI and Condition 2, both certified with
    /// exact gains. Tries the previous direction first, then solves the
    /// packing SDP on (1−ρ)c′/γ − (1+ρ)d′, retrying once with a fresh seed.
    pub fn call(
        &mut self,
        call: &OracleCall,
        terms: &TermSet,
        sketch: Option<&SketchContext<'_>>,
    ) -> Result<(WeightVector, OracleCertificate)> {
        self.calls += 1;
        let exact = exact_gains(call, terms);
        let ledger_before = sketch.map(|s| s.oracle.ledger().snapshot());
        let rho = call.rho();
        let objective = |g: &GainVectors| -> Vec<f64> {
            g.c.iter().zip(&g.d).map(|(c, d)| (1.0 - rho) * c / call.gamma - (1.0 + rho) * d).collect()
        };
        let finish = |mut cert: OracleCertificate| {
            if let (Some(ctx), Some(b)) = (sketch, ledger_before) {
                cert.ledger_diff = ctx.oracle.ledger().snapshot().diff(&b);
            }
            cert
        };

        // warm start along the previous direction, rescaled to the cap
        if let Some(prev) = &self.warm {
            let obj = objective(&exact);
            let masked: Vec<f64> = prev.iter().zip(&obj).map(|(p, o)| if *o > 0.0 { *p } else { 0.0 }).collect();
            if masked.iter().any(|&v| v > 0.0) {
                let lmax = eigh(&terms.combination(&masked))?.lambda_max();
                if lmax > 0.0 {
                    let scaled: Vec<f64> = masked.iter().map(|v| v * call.k / lmax).collect();
                    let cert = self.certify(call, &exact, terms, &scaled, self.seed)?;
                    if cert.cond1_holds() && cert.cond2_holds() {
                        return Ok((WeightVector::new(scaled)?, finish(cert)));
                    }
                }
            }
        }

        let mut last_slack = f64::NEG_INFINITY;
        for attempt in 0..2u64 {
            self.resolves += 1;
            let seed = self.seed.wrapping_add(self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(attempt);
            let gains = match (&self.gains, sketch) {
                (GainBackend::Sketch { rho: srho, c_jl, degree_cap }, Some(ctx)) => {
                    let cfg = SketchConfig {
                        rho: *srho,
                        rows: SketchConfig::required_rows(terms.n(), terms.d(), *srho, *c_jl),
                        seed,
                        degree_cap: *degree_cap,
                        c_jl: *c_jl,
                    };
                    sketched_gains(call, ctx, &cfg)?.0
                }
                _ => exact.clone(),
            };
            let obj = objective(&gains);
            let target = call.target(self.speed);
            // a retry falls back to the reference backend
            let backend = if attempt == 0 { self.sdp } else { SdpBackend::Reference };
            let opts = SdpOptions { warm_start: self.warm.clone(), stop_at: None };
            let (alpha, _rep) = packing_sdp_solve(&obj, terms, call.k, 0.2, backend, &opts)?;
            let cert = self.certify(call, &exact, terms, alpha.as_slice(), seed)?;
            last_slack = cert.slack;
            if cert.cond1_holds() && cert.cond2_holds() {
                if alpha.as_slice().iter().any(|&v| v > 0.0) {
                    self.warm = Some(alpha.as_slice().to_vec());
                }
                return Ok((alpha, finish(cert)));
            }
            // zero weights satisfy Condition 2 whenever the target is non-positive
            if target <= 0.0 {
                let zero = vec![0.0; terms.d()];
                let cert = self.certify(call, &exact, terms, &zero, seed)?;
                return Ok((WeightVector::zeros(terms.d()), finish(cert)));
            }
        }
        Err(SmrError::ConditionTwoFailed { slack: last_slack })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::matrix_function;
    use crate::matcore::KernelPolicy;
    use crate::oracles::{BasisElement, QueryLedger};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn state_with(a: DenseSymmetric, gamma: f64) -> BarrierState {
        let dec = eigh(&a).unwrap();
        let mut st = BarrierState::initial(a.n(), gamma, 0.05, SPEED).unwrap();
        st.u = dec.lambda_max() + 0.4;
        st.l = dec.lambda_min() / gamma - 0.4;
        st.a = a;
        st
    }

    fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> DenseSymmetric {
        let g = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        DenseSymmetric::new(&g * g.transpose()).unwrap()
    }

    #[test]
    fn gains_trace_identity() {
        let st = state_with(DenseSymmetric::from_diagonal(&[0.1, 0.2, 0.05]), 1.0);
        let call = OracleCall::from_state(&st).unwrap();
        let basis = BasisSet::new(3, vec![BasisElement::Dense(DenseSymmetric::identity(3))]).unwrap();
        let g = exact_gains(&call, &TermSet::from_basis(&basis).unwrap());
        assert_abs_diff_eq!(g.c[0], call.cplus.trace(), epsilon = 1e-9 * call.cplus.trace());
        assert_abs_diff_eq!(g.d[0], call.cminus.trace(), epsilon = 1e-9 * call.cminus.trace());
    }

    #[test]
    fn gains_diagonal_closed_form() {
        let st = state_with(DenseSymmetric::from_diagonal(&[0.1, 0.3]), 0.5);
        let call = OracleCall::from_state(&st).unwrap();
        let basis = BasisSet::new(2, BasisSet::diagonals(2)).unwrap();
        let g = exact_gains(&call, &TermSet::from_basis(&basis).unwrap());
        let psi = |x: f64| (1.0 / x).exp() / (x * x);
        for (i, a) in [0.1, 0.3].iter().enumerate() {
            let cp = 0.9 * psi(a / 0.5 - st.l);
            let cm = 1.1 * psi(st.u - a);
            assert_abs_diff_eq!(g.c[i], cp, epsilon = 1e-9 * cp);
            assert_abs_diff_eq!(g.d[i], cm, epsilon = 1e-9 * cm);
        }
    }

    #[test]
    fn gains_match_second_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 6;
        let a = random_psd(n, n, &mut rng).scale(0.02);
        let st = state_with(a.clone(), 0.7);
        let call = OracleCall::from_state(&st).unwrap();
        let mats: Vec<DenseSymmetric> = (0..10).map(|_| random_psd(n, 2, &mut rng)).collect();
        let g = exact_gains(&call, &TermSet::from_dense(n, &mats).unwrap());
        // second path: Ψ via matrix_function and explicit traces
        let psi = |x: f64| (1.0 / x).exp() / (x * x);
        let cp = matrix_function(&crate::barrier::lower_gap(&a, st.l, 0.7), psi, KernelPolicy::Reject).unwrap().scale(0.9);
        let cm = matrix_function(&crate::barrier::upper_gap(&a, st.u), psi, KernelPolicy::Reject).unwrap().scale(1.1);
        for (i, m) in mats.iter().enumerate() {
            let c = (cp.matrix() * m.matrix()).trace();
            let d = (cm.matrix() * m.matrix()).trace();
            assert!((g.c[i] - c).abs() <= 1e-9 * c.abs());
            assert!((g.d[i] - d).abs() <= 1e-9 * d.abs());
        }
    }

    #[test]
    fn whitening_requires_pd_b() {
        let basis = BasisSet::new(2, BasisSet::diagonals(2)).unwrap();
        let led = QueryLedger::new();
        let b = DenseSymmetric::from_row_slice(2, &[1.0, -1.0, -1.0, 1.0]).unwrap();
        let only = MeasurementOracle::from_dense_apply_only(&b, led);
        assert_eq!(whiten(&basis, &only).unwrap_err(), SmrError::SingularWhitening);
        let ident = MeasurementOracle::from_dense(&DenseSymmetric::identity(2), QueryLedger::new()).unwrap();
        assert!(whiten(&basis, &ident).unwrap().identity);
    }

    pub(crate) struct SketchFixture {
        pub raw: BasisSet,
        pub oracle: MeasurementOracle<'static>,
        pub acc: WeightVector,
        pub state: BarrierState,
        pub white: WhitenedBasis,
    }

    pub(crate) fn sketch_fixture(n: usize, d: usize, seed: u64) -> SketchFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_psd(n, n, &mut rng).add_identity(0.5);
        let els = (0..d).map(|_| BasisElement::Dense(random_psd(n, 2, &mut rng))).collect();
        let raw = BasisSet::new(n, els).unwrap();
        let oracle = MeasurementOracle::from_dense(&b, QueryLedger::new()).unwrap();
        let white = whiten(&raw, &oracle).unwrap();
        let acc = WeightVector::new((0..d).map(|_| rng.random_range(0.0..0.02)).collect()).unwrap();
        let a = white.terms.combination(acc.as_slice());
        let state = state_with(a, 0.8);
        SketchFixture { raw, oracle, acc, state, white }
    }

    #[test]
    fn sketch_agrees_with_exact_and_counts_queries() {
        let fx = sketch_fixture(8, 12, 1);
        let call = OracleCall::from_state(&fx.state).unwrap();
        let exact = exact_gains(&call, &fx.white.terms);
        let ctx = SketchContext { raw: &fx.raw, oracle: &fx.oracle, accumulated: &fx.acc };
        let cfg = SketchConfig::for_problem(8, 12, 0.1, 5);
        let (sk, rep) = sketched_gains(&call, &ctx, &cfg).unwrap();
        for i in 0..12 {
            assert!((sk.c[i] / exact.c[i] - 1.0).abs() <= 0.4);
            assert!((sk.d[i] / exact.d[i] - 1.0).abs() <= 0.4);
        }
        let rows = cfg.rows as u64;
        let per_row = (rep.degree_upper + 1 + rep.degree_lower + 1) as u64;
        assert_eq!(rep.ledger_diff.binv, rows * per_row);
        assert_eq!(rep.ledger_diff.sqrt, 2 * rows);
        assert_eq!(rep.ledger_diff.qf, 2 * rows);
        let short = SketchConfig { rows: cfg.rows - 1, ..cfg };
        assert!(matches!(sketched_gains(&call, &ctx, &short), Err(SmrError::SketchDeficient { .. })));
    }

    #[test]
    fn sketch_zero_element_reads_zero() {
        let mut fx = sketch_fixture(4, 3, 2);
        let mut els: Vec<BasisElement> = fx.raw.elements().to_vec();
        els.push(BasisElement::Dense(DenseSymmetric::zeros(4)));
        fx.raw = BasisSet::new(4, els).unwrap();
        let acc = WeightVector::new([fx.acc.as_slice(), &[0.0]].concat()).unwrap();
        let call = OracleCall::from_state(&fx.state).unwrap();
        let ctx = SketchContext { raw: &fx.raw, oracle: &fx.oracle, accumulated: &acc };
        let (sk, _) = sketched_gains(&call, &ctx, &SketchConfig::for_problem(4, 4, 0.3, 1)).unwrap();
        assert!(sk.c[3].abs() <= 1e-8 && sk.d[3].abs() <= 1e-8);
    }

    fn diag_terms(n: usize, diags: &[Vec<f64>]) -> TermSet {
        let mats: Vec<DenseSymmetric> = diags.iter().map(|d| DenseSymmetric::from_diagonal(d)).collect();
        TermSet::from_dense(n, &mats).unwrap()
    }

    #[test]
    fn sdp_small_examples() {
        for backend in [SdpBackend::Reference, SdpBackend::Mwu] {
            let t = TermSet::from_dense(1, &[DenseSymmetric::identity(1)]).unwrap();
            let (x, rep) = packing_sdp_solve(&[1.0], &t, 1.0, 0.1, backend, &SdpOptions::default()).unwrap();
            assert!(rep.objective >= 0.9 && x.as_slice()[0] <= 1.0 + 1e-8, "{backend:?} {rep:?}");
            let t = diag_terms(2, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
            let (x, rep) = packing_sdp_solve(&[1.0, 2.0], &t, 1.0, 0.1, backend, &SdpOptions::default()).unwrap();
            assert!(rep.objective >= 3.0 * 0.8, "{backend:?} {rep:?}");
            assert!(rep.lambda_max <= 1.0 + 1e-8);
            assert!(x.as_slice().iter().all(|&v| v >= 0.0));
            // negative coordinates are dropped
            let (x, _) = packing_sdp_solve(&[1.0, -2.0], &t, 1.0, 0.1, backend, &SdpOptions::default()).unwrap();
            assert_eq!(x.as_slice()[1], 0.0);
        }
        let t = diag_terms(2, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (x, rep) = packing_sdp_solve(&[1.0, 2.0], &t, 1.0, 0.1, SdpBackend::Reference, &SdpOptions::default()).unwrap();
        assert_abs_diff_eq!(rep.objective, 3.0, epsilon = 1e-3);
        assert_abs_diff_eq!(x.as_slice()[0], 1.0, epsilon = 1e-3);
    }

    /// Brute-force LP optimum for diagonal terms: max gᵀx s.t. Σ x_i diag_i ≤ cap.
    fn lp_bruteforce(g: &[f64], diags: &[Vec<f64>], cap: f64) -> f64 {
        // vertices of the polytope in dimension d = 3 via grid refinement
        let steps = 120;
        let ub: Vec<f64> = diags.iter().map(|d| cap / d.iter().cloned().fold(0.0, f64::max)).collect();
        let mut best: f64 = 0.0;
        for a in 0..=steps {
            for b in 0..=steps {
                let x0 = ub[0] * a as f64 / steps as f64;
                let x1 = ub[1] * b as f64 / steps as f64;
                // the best x2 given x0, x1 is the largest feasible value
                let mut x2 = ub[2];
                let mut feasible = true;
                for r in 0..diags[0].len() {
                    let used = x0 * diags[0][r] + x1 * diags[1][r];
                    if used > cap + 1e-12 {
                        feasible = false;
                    }
                    if diags[2][r] > 0.0 {
                        x2 = x2.min((cap - used) / diags[2][r]);
                    }
                }
                if feasible {
                    best = best.max(g[0] * x0 + g[1] * x1 + g[2] * x2.max(0.0));
                }
            }
        }
        best
    }

    #[test]
    fn sdp_random_diagonal_against_lp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let diags: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let opt = lp_bruteforce(&g, &diags, 1.0);
            let t = diag_terms(4, &diags);
            let delta = 0.1;
            for backend in [SdpBackend::Reference, SdpBackend::Mwu] {
                let (_, rep) = packing_sdp_solve(&g, &t, 1.0, delta, backend, &SdpOptions::default()).unwrap();
                assert!(rep.objective >= (1.0 - 2.0 * delta) * opt, "{backend:?}: {} vs {}", rep.objective, opt);
                assert!(rep.objective <= opt * (1.0 + 1e-2) + 1e-9);
            }
        }
    }

    #[test]
    fn existence_baseline_with_known_witness() {
        // Δ = k·Σw_iM_i satisfies Condition 2 with S = 1 and ε = 0
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let mats: Vec<DenseSymmetric> = (0..8).map(|_| random_psd(n, 1, &mut rng)).collect();
        let terms = TermSet::from_dense(n, &mats).unwrap();
        let w0 = vec![1.0; 8];
        let sum = terms.combination(&w0);
        let (lo, hi) = crate::matcore::extreme_eigs(&sum).unwrap();
        let w: Vec<f64> = w0.iter().map(|v| v / hi).collect();
        let gamma = lo / hi;
        let a = terms.combination(&w).scale(0.1);
        let mut st = state_with(a, gamma);
        st.eps = 0.05;
        let call = OracleCall::from_state(&st).unwrap();
        let g = exact_gains(&call, &terms);
        let alpha: Vec<f64> = w.iter().map(|v| v * call.k).collect();
        let lhs: f64 = alpha.iter().enumerate().map(|(i, a)| a * (g.c[i] / gamma - g.d[i])).sum();
        let rhs = call.k * (call.cplus.trace() - call.cminus.trace());
        assert!(lhs >= rhs - 1e-9 * rhs.abs());
    }

    #[test]
    fn single_identity_basis() {
        let st = state_with(DenseSymmetric::from_diagonal(&[0.1; 3]), 1.0);
        let call = OracleCall::from_state(&st).unwrap();
        let basis = BasisSet::new(3, vec![BasisElement::Dense(DenseSymmetric::identity(3))]).unwrap();
        let terms = TermSet::from_basis(&basis).unwrap();
        let mut o = MOracle::new(GainBackend::Exact, SdpBackend::Reference, 1);
        let (alpha, cert) = o.call(&call, &terms, None).unwrap();
        assert!(cert.cond1_holds() && cert.cond2_holds());
        let a = alpha.as_slice()[0];
        assert!(a <= call.k * (1.0 + 1e-8));
        if call.target(SPEED) > 0.0 {
            assert!(a >= call.k / 2.0);
        }
        assert_abs_diff_eq!(cert.cond2_lhs, a * (call.cplus.trace() - call.cminus.trace()), epsilon = 1e-9 * cert.cond2_lhs.abs().max(1.0));
    }

    #[test]
    fn identity_sandwich_instance_fifty_runs() {
        let n = 8;
        let mut ok = 0;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mats: Vec<DenseSymmetric> = (0..20).map(|_| random_psd(n, 1, &mut rng)).collect();
            let terms = TermSet::from_dense(n, &mats).unwrap();
            // normalize so that a feasible w with 0.5·I ⪯ Σw_iM_i ⪯ I may exist
            let sum = terms.combination(&[1.0; 20]);
            let (_, hi) = crate::matcore::extreme_eigs(&sum).unwrap();
            let acc: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..0.05) / hi).collect();
            let st = state_with(terms.combination(&acc), 0.5);
            let call = OracleCall::from_state(&st).unwrap();
            let mut o = MOracle::new(GainBackend::Exact, SdpBackend::Reference, seed);
            if let Ok((_, cert)) = o.call(&call, &terms, None) {
                assert!(cert.cond1_holds());
                if cert.cond2_holds() {
                    ok += 1;
                }
            }
        }
        assert!(ok >= 48, "{ok}/50");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sdp_output_always_feasible(seed in 0u64..10_000, n in 1usize..6, d in 1usize..8, mwu in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mats: Vec<DenseSymmetric> = (0..d).map(|_| random_psd(n, 1 + (seed as usize % n), &mut rng)).collect();
            let terms = TermSet::from_dense(n, &mats).unwrap();
            let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cap = rng.random_range(0.01..2.0);
            let backend = if mwu { SdpBackend::Mwu } else { SdpBackend::Reference };
            let (x, rep) = packing_sdp_solve(&g, &terms, cap, 0.2, backend, &SdpOptions::default()).unwrap();
            prop_assert!(x.as_slice().iter().all(|&v| v >= 0.0));
            prop_assert!(rep.lambda_max <= cap * (1.0 + 1e-8));
            for (i, gi) in g.iter().enumerate() {
                if *gi <= 0.0 { prop_assert_eq!(x.as_slice()[i], 0.0); }
            }
        }

        #[test]
        fn gains_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let st = state_with(random_psd(n, n, &mut rng).scale(0.01), 0.9);
            let call = OracleCall::from_state(&st).unwrap();
            let mats: Vec<DenseSymmetric> = (0..5).map(|_| random_psd(n, 2, &mut rng)).collect();
            let g = exact_gains(&call, &TermSet::from_dense(n, &mats).unwrap());
            let scale = call.cplus.max_abs().max(call.cminus.max_abs());
            prop_assert!(g.c.iter().chain(&g.d).all(|&v| v >= -1e-10 * scale));
        }
    }
}
