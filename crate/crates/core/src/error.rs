use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and a model) disagree on a dimension.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    NonFinite(&'static str),
    NotSquare { rows: usize, cols: usize },
    NotSymmetric { max_asymmetry: f64 },
    /// Jacobi sweeps exhausted before the off-diagonal norm dropped below tolerance.
    NoConvergence { sweeps: usize, residual: f64 },
    /// `eigenvalue + damping <= 0` for some eigenvalue.
    Singular { index: usize, eigenvalue: f64, damping: f64 },
    ZeroVariance(&'static str),
    InvalidArgument(String),
    MissingTraces(&'static str),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, step: usize, loss: f64 },
    RankDeficient {
        layer: String,
        requested: usize,
        effective_rank: usize,
    },
    MissingEigen(String),
    ZeroSelfInfluence { id: u64 },
    UnknownLayer(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                context,
                expected,
                found,
            } => write!(f, "{context}: expected dimension {expected}, found {found}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::NotSquare { rows, cols } => write!(f, "matrix is not square ({rows}x{cols})"),
            Error::NotSymmetric { max_asymmetry } => {
                write!(f, "matrix is not symmetric (max |a_ij - a_ji| = {max_asymmetry:e})")
            }
            Error::NoConvergence { sweeps, residual } => write!(
                f,
                "Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})"
            ),
            Error::Singular {
                index,
                eigenvalue,
                damping,
            } => write!(
                f,
                "singular damped system: eigenvalue {index} = {eigenvalue:e} with damping {damping:e}"
            ),
            Error::ZeroVariance(what) => write!(f, "zero rank variance in {what}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::MissingTraces(what) => write!(f, "missing traces: {what}"),
            Error::Diverged { epoch, step, loss } => {
                write!(f, "training diverged at epoch {epoch}, step {step}: loss = {loss}")
            }
            Error::RankDeficient {
                layer,
                requested,
                effective_rank,
            } => write!(
                f,
                "layer {layer}: requested {requested} components but effective rank is {effective_rank}"
            ),
            Error::MissingEigen(layer) => write!(f, "layer {layer}: eigendecomposition not fitted"),
            Error::ZeroSelfInfluence { id } => write!(f, "zero self-influence for id {id}"),
            Error::UnknownLayer(name) => write!(f, "unknown layer {name}"),
        }
    }
}

impl core::error::Error for Error {}
