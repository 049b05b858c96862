use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty mode grid: no lattice momentum satisfies |k| <= {cutoff}")]
    EmptyModeGrid { cutoff: f64 },

    #[error("basis too large: dimension {dim} exceeds the configured maximum {cap}")]
    BasisTooLarge { dim: u128, cap: usize },

    #[error("invalid mode index {index} (mode count {count})")]
    InvalidModeIndex { index: usize, count: usize },

    #[error("mode-count mismatch: basis has {basis} modes, grid has {grid}")]
    ModeCountMismatch { basis: usize, grid: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("exponential iteration did not converge after {iterations} terms (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("n_max = {n_max} too small: truncation defect {defect:.3e} above tolerance {tol:.3e}; use n_max >= {suggested}")]
    TruncationTooSmall {
        n_max: usize,
        defect: f64,
        tol: f64,
        suggested: usize,
    },

    #[error("Krylov propagation failed: error estimate {estimate:.3e} above tolerance {tol:.3e} with krylov_dim {krylov_dim} after {substeps} substeps")]
    KrylovFailure {
        estimate: f64,
        tol: f64,
        krylov_dim: usize,
        substeps: usize,
    },

    #[error("dimension {dim} above the dense oracle cap {cap}")]
    DimensionAboveCap { dim: usize, cap: usize },

    #[error("{what} is not normalized (norm^2 = {norm_sq:.12})")]
    NotNormalized { what: &'static str, norm_sq: f64 },

    #[error("matrix is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("empty time series")]
    EmptySeries,

    #[error("need at least {needed} snapshots, got {got}")]
    TooFewSnapshots { needed: usize, got: usize },
}
