use thiserror::Error;

/// Errors returned by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid covariance matrix: {0}")]
    InvalidCovariance(String),

    #[error("whitening matrix does not dominate sigma: smallest eigenvalue of delta - sigma is {min_eig:e}")]
    NotDominating { min_eig: f64 },

    #[error("A = inv(sigma) - inv(delta) is singular (eigenvalue ratio {ratio:e}); inflate delta slightly")]
    SingularA { ratio: f64 },

    #[error("insufficient degrees of freedom: need n >= d + r = {needed}, got n = {n}")]
    InsufficientDof { n: usize, needed: usize },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("|W| has a tie or a zero at position {0}")]
    TieOrZero(usize),

    #[error("not applicable: {0}")]
    Inapplicable(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: row {row}: {msg}")]
    Parse { path: String, row: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable tag for each variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ParameterOutOfRange(_) => "parameter_out_of_range",
            Error::Dimension(_) => "dimension_mismatch",
            Error::InvalidCovariance(_) => "invalid_covariance",
            Error::NotDominating { .. } => "not_psd_dominating",
            Error::SingularA { .. } => "singular_a",
            Error::InsufficientDof { .. } => "insufficient_dof",
            Error::RankDeficient(_) => "rank_deficient",
            Error::TieOrZero(_) => "tie_or_zero",
            Error::Inapplicable(_) => "inapplicable",
            Error::Numerical(_) => "numerical",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn out_of_range(msg: impl Into<String>) -> Error {
    Error::ParameterOutOfRange(msg.into())
}
