use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // container format
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // compatibility
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("dtype mismatch for tensor `{0}`")]
    DtypeMismatch(String),
    #[error("tensor `{name}` has rank {rank}; only rank <= 2 can be merged")]
    UnsupportedRank { name: String, rank: usize },
    #[error("expected {expected} entries, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    // numerics
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("svd did not converge")]
    ConvergenceFailure,
    #[error("rank {k} outside [1, {max}]")]
    RankOutOfRange { k: usize, max: usize },
    #[error("rank deficient: smallest singular value {smallest:e} < 1e-10 x largest {largest:e}")]
    RankDeficient { smallest: f64, largest: f64 },
    #[error("too many columns: {cols} > {rows} rows")]
    TooManyColumns { rows: usize, cols: usize },
    #[error("singular spectrum is all zero")]
    AllZeroSpectrum,
    #[error("invalid fractions: {0}")]
    InvalidFractions(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // configuration
    #[error("config error: {0}")]
    Config(String),

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                layer: layer.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, with layer context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }

    /// Stable short identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::MalformedHeader(_) => "malformed_header",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::TruncatedFile(_) => "truncated_file",
            Error::InvalidTensor { .. } => "invalid_tensor",
            Error::Io { .. } => "io",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::MissingTensor(_) => "missing_tensor",
            Error::DtypeMismatch(_) => "dtype_mismatch",
            Error::UnsupportedRank { .. } => "unsupported_rank",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptyMatrix => "empty_matrix",
            Error::NonFiniteInput => "non_finite_input",
            Error::ConvergenceFailure => "convergence_failure",
            Error::RankOutOfRange { .. } => "rank_out_of_range",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::TooManyColumns { .. } => "too_many_columns",
            Error::AllZeroSpectrum => "all_zero_spectrum",
            Error::InvalidFractions(_) => "invalid_fractions",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Layer { .. } => unreachable!("root() strips layer context"),
        }
    }

    /// Process exit code: 2 config, 3 compatibility, 4 numerical, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidFractions(_) => 2,
            Error::ShapeMismatch(_)
            | Error::MissingTensor(_)
            | Error::DtypeMismatch(_)
            | Error::UnsupportedRank { .. }
            | Error::LengthMismatch { .. } => 3,
            Error::EmptyMatrix
            | Error::NonFiniteInput
            | Error::ConvergenceFailure
            | Error::RankOutOfRange { .. }
            | Error::RankDeficient { .. }
            | Error::TooManyColumns { .. }
            | Error::AllZeroSpectrum => 4,
            Error::MalformedHeader(_)
            | Error::UnsupportedDtype(_)
            | Error::TruncatedFile(_)
            | Error::InvalidTensor { .. }
            | Error::Io { .. } => 5,
            Error::Layer { .. } => unreachable!("root() strips layer context"),
        }
    }
}
