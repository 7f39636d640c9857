//! Basis families by name or from a JSON manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmrError};
use crate::mmio::read_symmetric;
use crate::oracles::{BasisElement, BasisSet};

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestElement {
    Edge([usize; 2]),
    Diag(usize),
    Ones,
    /// Matrix Market file, relative to the manifest.
    Dense(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisManifest {
    pub n: usize,
    pub elements: Vec<ManifestElement>,
}

pub const NAMED_BASES: [&str; 4] = ["diag", "edges", "sdd", "edges-ones"];

/// Resolves `name` to a basis of dimension n: one of the named families
/// (diag, edges, sdd = edges ∪ diagonals, edges-ones) or a manifest path.
pub fn resolve_basis(name: &str, n: usize) -> Result<BasisSet> {
    match name {
        "diag" => BasisSet::new(n, BasisSet::diagonals(n)),
        "edges" => BasisSet::new(n, BasisSet::edges(n)),
        "sdd" => BasisSet::edges_and_diagonals(n),
        "edges-ones" => BasisSet::edges_and_ones(n),
        path => load_manifest(Path::new(path), n),
    }
}

pub fn load_manifest(path: &Path, n: usize) -> Result<BasisSet> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        SmrError::Io(format!(
            "basis {:?} is neither one of {} nor a readable manifest: {e}",
            path.display(),
            NAMED_BASES.join(", ")
        ))
    })?;
    let m: BasisManifest =
        serde_json::from_str(&text).map_err(|e| SmrError::Parse(format!("{}: {e}", path.display())))?;
    if m.n != n {
        return Err(SmrError::DimensionMismatch { expected: n, got: m.n });
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut elements = Vec::with_capacity(m.elements.len());
    for e in m.elements {
        elements.push(match e {
            ManifestElement::Edge([i, j]) => BasisElement::EdgeLaplacian(i, j),
            ManifestElement::Diag(i) => BasisElement::DiagonalUnit(i),
            ManifestElement::Ones => BasisElement::AllOnes,
            ManifestElement::Dense(f) => BasisElement::Dense(read_symmetric(&dir.join(f))?),
        });
    }
    BasisSet::new(n, elements)
}
