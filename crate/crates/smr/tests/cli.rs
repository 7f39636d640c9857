use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DVector;
use serde_json::Value;
use smr::fixtures::path_laplacian;
use smr::matcore::DenseSymmetric;
use smr::mmio::{write_symmetric, write_vector, MmFormat};

fn smr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smr")).args(args).output().expect("smr binary")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn recover_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let b = dir.path().join("B.mtx");
    write_symmetric(&b, &path_laplacian(4).add_identity(1.0), MmFormat::Coordinate).unwrap();
    let report = dir.path().join("report.json");
    let out = smr(&["recover", "--matrix", p(&b), "--basis", "sdd", "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["certificate"]["holds"], true);
    assert!(rep["certificate"]["lambda_min"].as_f64().unwrap() >= 0.25);

    let out = smr(&["verify", "--matrix", p(&b), "--basis", "sdd", "--result", p(&report)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["agrees_with_report"], true);
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let b = dir.path().join("B.mtx");
    write_symmetric(&b, &path_laplacian(5).add_identity(0.5), MmFormat::Array).unwrap();
    let args = ["recover", "--matrix", p(&b), "--basis", "sdd", "--seed", "3"];
    assert_eq!(smr(&args).stdout, smr(&args).stdout);
}

#[test]
fn generated_fixtures_solve() {
    let dir = tempfile::tempdir().unwrap();
    for (generator, mode) in [("inverse-m", "minv"), ("lap-pinv", "lapinv"), ("perturbed", "perturbed")] {
        let out_dir = dir.path().join(generator);
        let gen = smr(&["gen", "--generator", generator, "--n", "6", "--p", "0.6", "--gamma", "0.8", "--seed", "4", "--out", p(&out_dir)]);
        assert_eq!(gen.status.code(), Some(0), "{generator}: {}", String::from_utf8_lossy(&gen.stderr));
        let a = out_dir.join("A.mtx");
        let x = out_dir.join("x.mtx");
        let out = smr(&["solve", "--mode", mode, "--matrix", p(&a), "--gamma", "0.8", "--out", p(&x)]);
        assert_eq!(out.status.code(), Some(0), "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        let rep = json(&out);
        assert_eq!(rep["passed"], true);
        assert!(rep["residual"].as_f64().unwrap() <= 1e-8);
        assert!(x.exists());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let b = dir.path().join("B.mtx");
    write_symmetric(&b, &DenseSymmetric::identity(3), MmFormat::Array).unwrap();

    // validation and usage errors exit 1
    assert_eq!(smr(&["recover", "--matrix", p(&b), "--basis", "diag", "--eps", "0.2"]).status.code(), Some(1));
    assert_eq!(smr(&["recover", "--matrix", p(&dir.path().join("missing.mtx")), "--basis", "diag"]).status.code(), Some(1));
    assert_eq!(smr(&["frobnicate"]).status.code(), Some(1));
    let bad = dir.path().join("bad.mtx");
    std::fs::write(&bad, "not a matrix\n").unwrap();
    assert_eq!(smr(&["recover", "--matrix", p(&bad), "--basis", "diag"]).status.code(), Some(1));
    assert_eq!(smr(&["--help"]).status.code(), Some(0));

    // a right-hand side with a component along the kernel exits 2
    let a = dir.path().join("A.mtx");
    write_symmetric(&a, &path_laplacian(3), MmFormat::Array).unwrap();
    let rhs = dir.path().join("b.mtx");
    write_vector(&rhs, &DVector::from_element(3, 1.0)).unwrap();
    let out = smr(&["solve", "--mode", "lapinv", "--matrix", p(&a), "--rhs", p(&rhs)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inconsistent"));
}
