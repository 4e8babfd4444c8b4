use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular system: snapshots {i} and {j} have identical profiles (t={t}, gamma={gamma})")]
    DuplicateProfile {
        i: usize,
        j: usize,
        t: f64,
        gamma: f64,
    },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("refusing to extrapolate: target t={target} lies beyond the last snapshot t={last}")]
    Extrapolation { target: f64, last: f64 },

    #[error("snapshot store is corrupt: {0}")]
    Corrupt(String),

    #[error("checksum mismatch in {path}: expected {expected:08x}, found {found:08x}")]
    Checksum {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("unsupported snapshot format version {0}")]
    Version(u16),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
