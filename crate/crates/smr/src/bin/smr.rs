use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use smr::approximator::{whiten_and_recover, ApproximatorConfig, RecoveryResult, SandwichCertificate, CERT_TOL};
use smr::fixtures::{connected_gnp_laplacian, generate, GENERATORS};
use smr::iterative::detect_kernel;
use smr::manifest::resolve_basis;
use smr::matcore::{loewner_sandwich, DenseSymmetric};
use smr::mmio::{read_symmetric, read_vector, write_symmetric, write_vector, MmFormat};
use smr::moracle::GainBackend;
use smr::oracles::{MeasurementOracle, QueryLedger, WeightVector};
use smr::recovery::{lap_pinv_solve, mmatrix_inv_solve, perturbed_laplacian_solve, PathConfig};
use smr::{Result, SmrError};

/// Residual a solve must reach to exit 0.
const SOLVE_THRESHOLD: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "smr", version, about = "Spectral matrix recovery from restricted oracle access")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded fixture with ground-truth metadata.
    Gen(GenArgs),
    /// Recover a combination of basis matrices sandwiched against B.
    Recover(RecoverArgs),
    /// Solve a linear system through recovery.
    Solve(SolveArgs),
    /// Re-check a recovery report against its matrix.
    Verify(VerifyArgs),
    /// Time recovery on a random Laplacian plus identity.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Exact,
    Sketch,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Perturbed,
    Minv,
    Lapinv,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Backend::Exact)]
    backend: Backend,
    /// Sketch accuracy for --backend sketch.
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl Common {
    fn gains(&self) -> Result<GainBackend> {
        Ok(match self.backend {
            Backend::Exact => GainBackend::Exact,
            Backend::Sketch => {
                if !(self.rho > 0.0 && self.rho < 1.0) {
                    return Err(SmrError::ParamOutOfRange(format!("rho {} outside (0, 1)", self.rho)));
                }
                GainBackend::sketch(self.rho)
            }
        })
    }

    fn approximator(&self) -> Result<ApproximatorConfig> {
        let cfg = ApproximatorConfig { gains: self.gains()?, seed: self.seed, ..ApproximatorConfig::new(self.eps, self.gamma) };
        cfg.validate()?;
        Ok(cfg)
    }

    fn path(&self) -> Result<PathConfig> {
        self.approximator()?;
        Ok(PathConfig { gains: self.gains()?, seed: self.seed, ..PathConfig::new(self.eps, self.gamma) })
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(GENERATORS))]
    generator: String,
    #[arg(long)]
    n: usize,
    /// Edge probability.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Witness quality for the perturbed generator.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the .mtx files and meta.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// diag, edges, sdd, edges-ones, or a JSON manifest.
    #[arg(long)]
    basis: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    matrix: PathBuf,
    /// Matrix Market vector, or `random-orthogonal-to-kernel`.
    #[arg(long, default_value = "random-orthogonal-to-kernel")]
    rhs: String,
    /// Write the solution as a Matrix Market vector.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    basis: String,
    /// Recovery report to check.
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Identity shift added to the Laplacian.
    #[arg(long, default_value_t = 0.1)]
    shift: f64,
    #[command(flatten)]
    common: Common,
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SmrError::Io(e.to_string()))? + "\n";
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| SmrError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SMR_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(t) if t >= 1 => {}
            _ => return Err(SmrError::ParamOutOfRange(format!("SMR_THREADS={v:?} is not a positive integer"))),
        }
    }
    Ok(())
}

fn status(holds: bool) -> ExitCode {
    if holds {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let fx = generate(&a.generator, a.n, a.p, a.gamma, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| SmrError::Io(format!("{}: {e}", a.out.display())))?;
    for (name, m) in &fx.matrices {
        write_symmetric(&a.out.join(format!("{name}.mtx")), m, MmFormat::Array)?;
    }
    emit(&fx.meta, Some(&a.out.join("meta.json")))?;
    emit(&fx.meta, None)?;
    Ok(ExitCode::SUCCESS)
}

fn recover(b: &DenseSymmetric, basis_name: &str, cfg: &ApproximatorConfig) -> Result<RecoveryResult> {
    let basis = resolve_basis(basis_name, b.n())?;
    let oracle = MeasurementOracle::from_dense(b, QueryLedger::new())?;
    whiten_and_recover(&basis, &oracle, cfg)
}

fn cmd_recover(a: RecoverArgs) -> Result<ExitCode> {
    let cfg = a.common.approximator()?;
    let b = read_symmetric(&a.matrix)?;
    let res = recover(&b, &a.basis, &cfg)?;
    emit(&res, a.common.report.as_deref())?;
    Ok(status(res.certificate.holds))
}

fn rhs(source: &str, a: &DenseSymmetric, seed: u64) -> Result<DVector<f64>> {
    if source != "random-orthogonal-to-kernel" {
        let b = read_vector(Path::new(source))?;
        if b.len() != a.n() {
            return Err(SmrError::DimensionMismatch { expected: a.n(), got: b.len() });
        }
        return Ok(b);
    }
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = DVector::from_fn(a.n(), |_, _| rng.random_range(-1.0..1.0));
    let k = detect_kernel(a)?;
    if k.ncols() > 0 {
        let c = k.transpose() * &b;
        b -= &k * c;
    }
    Ok(b)
}

fn cmd_solve(a: SolveArgs) -> Result<ExitCode> {
    let cfg = a.common.path()?;
    let m = read_symmetric(&a.matrix)?;
    let b = rhs(&a.rhs, &m, a.common.seed)?;
    let (x, residual, detail): (DVector<f64>, f64, Value) = match a.mode {
        Mode::Perturbed => {
            let r = perturbed_laplacian_solve(&m, a.common.gamma, &b, &cfg)?;
            (r.x.clone(), r.residual, serde_json::to_value(&r).expect("serializable"))
        }
        Mode::Minv => {
            let r = mmatrix_inv_solve(&m, &b, &cfg)?;
            (r.x.clone(), r.residual, serde_json::to_value(&r).expect("serializable"))
        }
        Mode::Lapinv => {
            let r = lap_pinv_solve(&m, &b, &cfg)?;
            (r.x.clone(), r.residual, serde_json::to_value(&r).expect("serializable"))
        }
    };
    if let Some(out) = &a.out {
        write_vector(out, &x)?;
    }
    let passed = residual <= SOLVE_THRESHOLD;
    let mode = match a.mode {
        Mode::Perturbed => "perturbed",
        Mode::Minv => "minv",
        Mode::Lapinv => "lapinv",
    };
    let report = json!({
        "schema": 1,
        "command": "solve",
        "mode": mode,
        "n": m.n(),
        "residual": residual,
        "threshold": SOLVE_THRESHOLD,
        "passed": passed,
        "x": x.iter().copied().collect::<Vec<f64>>(),
        "detail": detail,
    });
    emit(&report, a.common.report.as_deref())?;
    Ok(status(passed))
}

#[derive(Serialize)]
struct VerifyReport {
    schema: u32,
    matrix: String,
    certificate: SandwichCertificate,
    /// Whether the recomputed verdict agrees with the stored one.
    agrees_with_report: bool,
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let b = read_symmetric(&a.matrix)?;
    let text = std::fs::read_to_string(&a.result).map_err(|e| SmrError::Io(format!("{}: {e}", a.result.display())))?;
    let stored: RecoveryResult =
        serde_json::from_str(&text).map_err(|e| SmrError::Parse(format!("{}: {e}", a.result.display())))?;
    let basis = resolve_basis(&a.basis, b.n())?;
    if stored.d != basis.d() {
        return Err(SmrError::DimensionMismatch { expected: basis.d(), got: stored.d });
    }
    let mut w = vec![0.0; stored.d];
    for &(i, v) in &stored.weights {
        if i >= stored.d {
            return Err(SmrError::ValidationFailed(format!("weight index {i} out of range")));
        }
        w[i] = v;
    }
    let x = basis.materialize(&WeightVector::new(w)?)?;
    let lo = stored.certificate.lo;
    let hi = stored.certificate.hi;
    let c = loewner_sandwich(&x, &b, lo, hi, CERT_TOL)?;
    let cert = SandwichCertificate::from_loewner(lo, hi, &c);
    let rep = VerifyReport {
        schema: 1,
        matrix: a.matrix.display().to_string(),
        agrees_with_report: cert.holds == stored.certificate.holds,
        certificate: cert,
    };
    emit(&rep, a.report.as_deref())?;
    Ok(status(cert.holds))
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let cfg = a.common.approximator()?;
    let b = connected_gnp_laplacian(a.n, a.p, a.common.seed)?.add_identity(a.shift);
    let start = Instant::now();
    let res = recover(&b, "sdd", &cfg)?;
    eprintln!("bench: n = {}, {} iterations in {:.3} s", a.n, res.iterations, start.elapsed().as_secs_f64());
    let report = json!({
        "schema": 1,
        "command": "bench",
        "n": a.n,
        "p": a.p,
        "shift": a.shift,
        "result": serde_json::to_value(&res).expect("serializable"),
    });
    emit(&report, a.common.report.as_deref())?;
    Ok(status(res.certificate.holds))
}

fn main() -> ExitCode {
    // usage errors are validation errors (exit 1), not clap's default 2
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let run = check_threads().and_then(|_| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Recover(a) => cmd_recover(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
    });
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
