use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice {lx}x{ly}: both dimensions must be at least 2")]
    DegenerateLattice { lx: usize, ly: usize },

    #[error("invalid cell id {0}")]
    InvalidCell(usize),

    #[error("bond {bond} is not part of cell {cell}")]
    BondNotInCell { cell: usize, bond: usize },

    #[error("configuration has {got} spins, lattice has {expected}")]
    ConfigLength { expected: usize, got: usize },

    #[error("spin value {0} is not +1 or -1")]
    InvalidSpin(i8),

    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamLength { expected: usize, got: usize },

    #[error("lattice mismatch: {0}x{1} vs {2}x{3}")]
    LatticeMismatch(usize, usize, usize, usize),

    #[error("wavefunction amplitude vanishes at the requested configuration")]
    ZeroAmplitude,

    #[error("exact enumeration over 2^{n_spins} configurations exceeds the budget of 2^{max}")]
    EnumerationBudget { n_spins: usize, max: usize },

    #[error("wavefunction has zero norm")]
    ZeroNorm,

    #[error("no configuration with nonzero amplitude found to start the sampler")]
    NoValidStart,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "optimization diverged at iteration {iteration}: energy {energy} vs initial {initial}"
    )]
    Diverged {
        iteration: usize,
        energy: f64,
        initial: f64,
    },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("ensemble chain {chain} aborted at step {step}: {reason}")]
    ChainAborted {
        chain: usize,
        step: usize,
        reason: String,
    },

    #[error("stage {stage} failed: {reason}")]
    StageFailed { stage: String, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
