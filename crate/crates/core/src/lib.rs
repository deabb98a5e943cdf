//! Exact high-dimensional generalization theory for in-context linear
//! regression by linear attention, validated by a finite-size Monte Carlo
//! simulator of the same model.
//!
//! The crate is organized around four domain modules (plus [`rng`] for
//! reproducible hierarchical random streams):
//!
//! - [`covariance`] — task covariances in spectral form (power-law, uniform
//!   linear, spikes, low rank) with trace normalization and basis handling.
//! - [`theory`] — the self-consistent deterministic-equivalent solver
//!   (effective ridge λ̃, effective noise σ, Stieltjes transform M_κ and its
//!   derivative) and the closed-form ICL/IDG generalization errors for
//!   arbitrary train/test covariance pairs, including the infinite-data
//!   phase-transition limit and context-length curves.
//! - [`alignment`] — the misalignment functional ⟨C_test, K⟩, comparison
//!   metrics (CKA, inverse-train trace, Spearman rank correlation), and Ruhe
//!   trace bounds.
//! - [`simulator`] — the sampled model at finite size: pretraining batches,
//!   rank-1 context features, the closed-form ridge fit of Γ*, and test error
//!   measured both empirically and through exact population moments.

pub mod alignment;
pub mod covariance;
pub mod rng;
pub mod simulator;
pub mod theory;

mod linalg;

pub use covariance::CovarianceSpec;
pub use alignment::AlignmentReport;
pub use simulator::{
    GammaEstimator, PopulationMoments, SimBatch, SimConfig, SimResult, TestMode,
};
pub use theory::{ModelParams, SolverSolution, TheoryErrors};

/// Errors produced by solvers, constructors, and the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A parameter combination the theory does not characterize (for example
    /// the ridgeless interpolation threshold τ = 1 at λ = 0).
    #[error("unsupported parameters: {0}")]
    Unsupported(String),

    /// An iterative solve failed to reach its residual target.
    #[error("solver failed to converge: residual {residual:.3e} after {iterations} iterations")]
    ConvergenceFailure { residual: f64, iterations: usize },

    /// The regression normal equations could not be factorized at the
    /// requested ridge.
    #[error(
        "linear system ill-conditioned at ridge {lambda:.3e} (condition estimate {cond_estimate:.3e})"
    )]
    IllConditioned { cond_estimate: f64, lambda: f64 },

    /// The infinite-data limit is undefined exactly at κ = rank/d; both
    /// one-sided limits are reported instead.
    #[error(
        "limit undefined at the rank boundary kappa = rank/d (one-sided values {below:.6e} / {above:.6e})"
    )]
    RankBoundary { below: f64, above: f64 },

    /// A dense linear-algebra backend call failed.
    #[error("linear algebra backend error: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}

pub type Result<T> = std::result::Result<T, Error>;
