use alloc::string::String;
use core::fmt;

/// Every failure the core can report. Variants mirror the error names used by
/// the individual operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    NonSymmetric { i: usize, j: usize },
    NoConvergence { rotations: usize },
    DimensionMismatch { expected: usize, got: usize },
    RankDeficient,
    InvalidUnit(usize),
    TooLarge { n: usize, max: usize },
    SameUnit,
    OrderOutOfRange { s: usize, max: usize },
    BadGrid,
    Divergence { step: usize },
    BadRedistribution(&'static str),
    ZeroBase,
    BadLayer(usize),
    NotResidual,
    ZeroGradient,
    NotBalancedPair,
    UnknownCheck(String),
    TooFewInputs,
    BadSpec(String),
    Empty,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonSymmetric { i, j } => write!(f, "matrix is not symmetric at ({i}, {j})"),
            Error::NoConvergence { rotations } => {
                write!(f, "jacobi did not converge within {rotations} rotations")
            }
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::RankDeficient => f.write_str("columns are linearly dependent"),
            Error::InvalidUnit(a) => write!(f, "unit {a} is not part of the game"),
            Error::TooLarge { n, max } => {
                write!(f, "{n} units exceeds the exact-enumeration limit of {max}")
            }
            Error::SameUnit => f.write_str("pairwise interaction needs two distinct units"),
            Error::OrderOutOfRange { s, max } => write!(f, "order {s} outside 0..={max}"),
            Error::BadGrid => f.write_str("grid size does not fit the image"),
            Error::Divergence { step } => write!(f, "loss became non-finite at step {step}"),
            Error::BadRedistribution(why) => write!(f, "invalid redistribution matrix: {why}"),
            Error::ZeroBase => f.write_str("base perturbation is zero"),
            Error::BadLayer(k) => write!(f, "layer index {k} out of range"),
            Error::NotResidual => f.write_str("operation needs a residual network"),
            Error::ZeroGradient => f.write_str("gradient vanishes"),
            Error::NotBalancedPair => f.write_str("q is not more balanced than p"),
            Error::UnknownCheck(id) => write!(f, "unknown check `{id}`"),
            Error::TooFewInputs => f.write_str("need at least two inputs"),
            Error::BadSpec(why) => write!(f, "bad specification: {why}"),
            Error::Empty => f.write_str("nothing to report"),
        }
    }
}

impl core::error::Error for Error {}
