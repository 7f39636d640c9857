//! Matrix Market reader and writer (coordinate and array formats).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmrError};
use crate::matcore::DenseSymmetric;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmFormat {
    Coordinate,
    Array,
}

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

fn parse_err(line: usize, msg: impl Into<String>) -> SmrError {
    SmrError::Parse(format!("line {}: {}", line, msg.into()))
}

/// Parses a Matrix Market document into a dense matrix.
pub fn parse_dense(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let tokens: Vec<String> = header.split_whitespace().map(|t| t.to_ascii_lowercase()).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(parse_err(1, "expected '%%MatrixMarket matrix <format> real <symmetry>'"));
    }
    let format = match tokens[2].as_str() {
        "coordinate" => MmFormat::Coordinate,
        "array" => MmFormat::Array,
        other => return Err(parse_err(1, format!("unsupported format '{other}'"))),
    };
    if tokens[3] != "real" && tokens[3] != "integer" && tokens[3] != "double" {
        return Err(parse_err(1, format!("unsupported field '{}'", tokens[3])));
    }
    let symmetric = match tokens[4].as_str() {
        "symmetric" => true,
        "general" => false,
        other => return Err(parse_err(1, format!("unsupported symmetry '{other}'"))),
    };
    let mut body = lines.filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('%')
    });
    let (size_no, size_line) = body.next().ok_or_else(|| parse_err(2, "missing size line"))?;
    let dims: Vec<usize> = size_line
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| parse_err(size_no + 1, format!("bad size '{t}'"))))
        .collect::<Result<_>>()?;
    let parse_f = |no: usize, t: &str| -> Result<f64> {
        let v = t.parse::<f64>().map_err(|_| parse_err(no + 1, format!("bad value '{t}'")))?;
        if !v.is_finite() {
            return Err(parse_err(no + 1, "non-finite value"));
        }
        Ok(v)
    };
    match format {
        MmFormat::Coordinate => {
            if dims.len() != 3 {
                return Err(parse_err(size_no + 1, "coordinate size line needs 'rows cols nnz'"));
            }
            let (r, c, nnz) = (dims[0], dims[1], dims[2]);
            let mut m = DMatrix::zeros(r, c);
            let mut seen = 0;
            for (no, line) in body {
                let t: Vec<&str> = line.split_whitespace().collect();
                if t.len() != 3 {
                    return Err(parse_err(no + 1, "entry needs 'row col value'"));
                }
                let i: usize = t[0].parse().map_err(|_| parse_err(no + 1, "bad row index"))?;
                let j: usize = t[1].parse().map_err(|_| parse_err(no + 1, "bad column index"))?;
                if i == 0 || j == 0 || i > r || j > c {
                    return Err(parse_err(no + 1, format!("index ({i},{j}) out of range")));
                }
                let v = parse_f(no, t[2])?;
                m[(i - 1, j - 1)] += v;
                if symmetric && i != j {
                    m[(j - 1, i - 1)] += v;
                }
                seen += 1;
            }
            if seen != nnz {
                return Err(SmrError::Parse(format!("expected {nnz} entries, found {seen}")));
            }
            Ok(m)
        }
        MmFormat::Array => {
            if dims.len() != 2 {
                return Err(parse_err(size_no + 1, "array size line needs 'rows cols'"));
            }
            let (r, c) = (dims[0], dims[1]);
            let mut vals = Vec::new();
            for (no, line) in body {
                for t in line.split_whitespace() {
                    vals.push(parse_f(no, t)?);
                }
            }
            let mut m = DMatrix::zeros(r, c);
            let mut it = vals.into_iter();
            let mut take = || it.next().ok_or_else(|| SmrError::Parse("too few array values".into()));
            for j in 0..c {
                let start = if symmetric { j } else { 0 };
                for i in start..r {
                    let v = take()?;
                    m[(i, j)] = v;
                    if symmetric {
                        m[(j, i)] = v;
                    }
                }
            }
            if it.next().is_some() {
                return Err(SmrError::Parse("too many array values".into()));
            }
            Ok(m)
        }
    }
}

/// Parses a square Matrix Market document into a symmetric matrix.
pub fn parse_symmetric(text: &str) -> Result<DenseSymmetric> {
    let m = parse_dense(text)?;
    if m.nrows() != m.ncols() {
        return Err(SmrError::Parse(format!("matrix is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
    let asym = (&m - m.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(SmrError::Parse(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    DenseSymmetric::new(m)
}

/// Writes a symmetric matrix. Coordinate output keeps the lower triangle nonzeros.
pub fn format_symmetric(a: &DenseSymmetric, format: MmFormat) -> String {
    let n = a.n();
    let mut s = String::new();
    match format {
        MmFormat::Coordinate => {
            let mut entries = Vec::new();
            for j in 0..n {
                for i in j..n {
                    let v = a.get(i, j);
                    if v != 0.0 {
                        entries.push((i, j, v));
                    }
                }
            }
            s.push_str("%%MatrixMarket matrix coordinate real symmetric\n");
            let _ = writeln!(s, "{} {} {}", n, n, entries.len());
            for (i, j, v) in entries {
                let _ = writeln!(s, "{} {} {}", i + 1, j + 1, fmt17(v));
            }
        }
        MmFormat::Array => {
            s.push_str("%%MatrixMarket matrix array real symmetric\n");
            let _ = writeln!(s, "{} {}", n, n);
            for j in 0..n {
                for i in j..n {
                    let _ = writeln!(s, "{}", fmt17(a.get(i, j)));
                }
            }
        }
    }
    s
}

/// Writes a column vector in array format.
pub fn format_vector(x: &DVector<f64>) -> String {
    let mut s = String::from("%%MatrixMarket matrix array real general\n");
    let _ = writeln!(s, "{} 1", x.len());
    for v in x.iter() {
        let _ = writeln!(s, "{}", fmt17(*v));
    }
    s
}

/// Parses an n×1 (or 1×n) array into a vector.
pub fn parse_vector(text: &str) -> Result<DVector<f64>> {
    let m = parse_dense(text)?;
    if m.ncols() == 1 {
        Ok(m.column(0).into_owned())
    } else if m.nrows() == 1 {
        Ok(m.row(0).transpose())
    } else {
        Err(SmrError::Parse(format!("expected a vector, got {}x{}", m.nrows(), m.ncols())))
    }
}

pub fn read_symmetric(path: &Path) -> Result<DenseSymmetric> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SmrError::Io(format!("{}: {}", path.display(), e)))?;
    parse_symmetric(&text).map_err(|e| match e {
        SmrError::Parse(m) => SmrError::Parse(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

pub fn write_symmetric(path: &Path, a: &DenseSymmetric, format: MmFormat) -> Result<()> {
    std::fs::write(path, format_symmetric(a, format))
        .map_err(|e| SmrError::Io(format!("{}: {}", path.display(), e)))
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SmrError::Io(format!("{}: {}", path.display(), e)))?;
    parse_vector(&text)
}

pub fn write_vector(path: &Path, x: &DVector<f64>) -> Result<()> {
    std::fs::write(path, format_vector(x)).map_err(|e| SmrError::Io(format!("{}: {}", path.display(), e)))
}
