use nalgebra::DMatrix;
use thiserror::Error;

/// Errors produced by the estimation and inference pipeline.
///
/// Variants split into two broad classes: input/validation problems
/// (bad data, bad configuration) and solver failures (iteration caps,
/// infeasible programs, degenerate variance estimates). The CLI maps
/// the former to exit code 1 and the latter to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("invalid replicates: need at least 2 replicate columns, got {0}")]
    InvalidReplicates(usize),

    #[error("matrix not symmetric: max asymmetry {0:.3e} exceeds threshold")]
    NotSymmetric(f64),

    #[error("symmetric eigendecomposition failed to converge")]
    EigFailure,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// ADMM hit the iteration cap with residuals above tolerance.
    /// The best iterate is carried so callers may accept it explicitly.
    #[error(
        "PSD projection did not converge after {iters} iterations \
         (primal residual {primal:.3e}, dual residual {dual:.3e})"
    )]
    PsdNonConvergence {
        iters: usize,
        primal: f64,
        dual: f64,
        best: Box<DMatrix<f64>>,
    },

    #[error("coordinate descent did not converge after {0} sweeps")]
    LassoNonConvergence(usize),

    #[error("empty tuning grid")]
    EmptyGrid,

    #[error("fold {fold} has only {size} observations (need at least 2)")]
    FoldTooSmall { fold: usize, size: usize },

    #[error("linear program is infeasible (lambda' too small for this Gram matrix)")]
    Infeasible,

    #[error("simplex stalled: iteration cap {0} reached")]
    SolverStall(usize),

    #[error("selected support of size {support} exceeds sample size {n}; refit refused")]
    SupportTooLarge { support: usize, n: usize },

    #[error("plug-in test variance is non-positive ({0:.3e}); moments may be misspecified")]
    NonPositiveVariance(f64),

    #[error("score derivative {0:.3e} is below the floor; x is nearly collinear with z")]
    DegenerateDenominator(f64),

    #[error("invalid AR(1) parameter rho = {0}; need |rho| < 1")]
    BadRho(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("missing column `{0}` in input file")]
    MissingColumn(String),

    #[error("non-numeric cell at row {row}, column `{column}`: `{value}`")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that indicate a solver failure rather than bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::EigFailure
                | Error::PsdNonConvergence { .. }
                | Error::LassoNonConvergence(_)
                | Error::Infeasible
                | Error::SolverStall(_)
                | Error::NonPositiveVariance(_)
                | Error::DegenerateDenominator(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
