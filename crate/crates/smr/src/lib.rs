//! Spectral approximation of structured PSD matrices from restricted oracle
//! access, and the linear-system solvers built on it.

pub mod error;
pub mod iterative;
pub mod matcore;
pub mod mmio;
pub mod oracles;
pub mod sqrtpoly;
pub mod barrier;
pub mod moracle;
pub mod approximator;
pub mod recovery;
pub mod fixtures;
pub mod manifest;

pub use error::{Result, SmrError};
