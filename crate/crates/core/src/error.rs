use thiserror::Error;

/// Errors produced by the simulation, density, spectral and estimation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid potential: {0}")]
    InvalidPotential(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not enough moments supplied: need raw moments up to order {needed}, got {got}")]
    MissingMoments { needed: usize, got: usize },

    #[error("trajectory diverged: non-finite value at step {step}, particle {particle}")]
    NonFinite { step: usize, particle: usize },

    #[error("sampling interval {delta} is not an integer multiple of the path step {step}")]
    StrideNotInteger { delta: f64, step: f64 },

    #[error("stationary density normalizer is degenerate ({0})")]
    DegenerateDensity(String),

    #[error("self-consistency iteration did not converge; last residuals {0:?}")]
    FixedPointDiverged(Vec<f64>),

    #[error(
        "weighted basis lost orthogonality (max deviation {loss:.3e}); \
         reduce the basis degree or refine the density grid"
    )]
    BasisIllConditioned { loss: f64 },

    #[error("eigenproblem assembly failed: {0}")]
    EigenAssembly(String),

    #[error("eigenfunction index {j} out of range (1..={j_max})")]
    EigenIndexOutOfRange { j: usize, j_max: usize },

    #[error(
        "estimating-function Jacobian is numerically singular (condition {cond:.3e}); \
         the nondegeneracy requirement on the mean Jacobian fails for this setup"
    )]
    SingularJacobian { cond: f64 },

    #[error("estimator undefined for this sample: {0}")]
    EstimatorUndefined(String),

    #[error("root solve failed: {0}")]
    SolverFailed(String),

    #[error("no particle produced a converged estimate")]
    AllParticlesFailed,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
