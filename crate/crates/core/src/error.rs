use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for `op`.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A non-finite value was met; `context` names where.
    NonFinite { context: String },
    /// `grad` was asked to differentiate a tensor with more than one element.
    NotScalar { shape: Vec<usize> },
    /// Incoherent model, data, or configuration description.
    Spec(String),
    /// Two parameter sets that must match in names, order and shapes do not.
    Congruence(String),
    /// An example with zero variance cannot be z-scored.
    ConstantInput { example: usize },
    /// Episode sampling or evaluation ran out of examples.
    Episode { site: usize, reason: String },
    /// A metric needs both classes present.
    DegenerateLabels,
    /// A precondition of an evaluation protocol failed.
    Precondition(String),
    /// Every random-search trial failed.
    SearchExhausted { trials: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn is_non_finite(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NotScalar { shape } => {
                write!(f, "gradient requires a scalar output, got shape {shape:?}")
            }
            Error::Spec(msg) => write!(f, "invalid specification: {msg}"),
            Error::Congruence(msg) => write!(f, "parameter sets are not congruent: {msg}"),
            Error::ConstantInput { example } => {
                write!(
                    f,
                    "example {example} has zero variance and cannot be z-scored"
                )
            }
            Error::Episode { site, reason } => write!(f, "site {site}: {reason}"),
            Error::DegenerateLabels => write!(f, "labels contain a single class"),
            Error::Precondition(msg) => write!(f, "precondition failed: {msg}"),
            Error::SearchExhausted { trials } => {
                write!(f, "all {trials} search trials failed")
            }
        }
    }
}

impl core::error::Error for Error {}
