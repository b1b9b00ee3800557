//! Desk-scale numerics for strong right-invariant sub-Riemannian geometry on
//! diffeomorphism groups.
//!
//! Velocity fields live in a reproducing-kernel Hilbert space (a Gaussian
//! kernel, optionally constrained to a frame of vector fields), and
//! diffeomorphisms are represented through their action on finitely many
//! particles. On top of that representation the crate provides:
//!
//! - normal geodesic shooting on landmark phase space ([`hamiltonian`],
//!   [`integrator`]),
//! - full particle flows with Jacobian transport and the momentum pushforward
//!   check ([`flow`]),
//! - inexact landmark matching by gradient descent on the shooting functional
//!   ([`matching`]),
//! - commutator flows, chart maps and ball-box length estimates for
//!   bracket-generating frames ([`steering`]),
//! - horizontal Moser transport of densities on the flat torus via a
//!   sub-Riemannian Laplacian solve ([`moser`]).
//!
//! ```
//! use nalgebra::DMatrix;
//! use subriem::{hamiltonian::LandmarkState, kernel::KernelSpec};
//!
//! // One landmark shot with covector a travels on a straight line.
//! let spec = KernelSpec::full(1.0);
//! let state = LandmarkState::new(
//!     DMatrix::from_column_slice(2, 1, &[0.0, 0.0]),
//!     DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
//! )
//! .unwrap();
//! let traj = subriem::hamiltonian::shoot(&spec, &state, 1.0, 100).unwrap();
//! let end = traj.landmark_state(traj.len() - 1);
//! assert!((end.positions()[(0, 0)] - 1.0).abs() < 1e-12);
//! ```

pub mod flow;
pub mod frame;
pub mod grid;
pub mod hamiltonian;
pub mod integrator;
pub mod kernel;
pub mod matching;
pub mod moser;
pub mod presets;
pub mod steering;
pub mod verify;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate landmark configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("bracket word of length {depth} exceeds the supported depth {max}")]
    UnsupportedDepth { depth: usize, max: usize },

    /// Integration produced a non-finite or absurdly large state. Carries the
    /// part of the trajectory computed before the failure.
    #[error("state blew up at step {step}")]
    BlowUp {
        step: usize,
        partial: Box<integrator::Trajectory>,
    },

    #[error("right-hand side is incompatible: weighted mean {0:.3e} is nonzero")]
    IncompatibleRhs(f64),

    #[error("conjugate gradient did not converge within {0} iterations")]
    SolveNonConverged(usize),

    #[error("orientation lost: jacobian determinant {0:.3e} is not positive")]
    Orientation(f64),

    #[error("total mass mismatch: {0:.6e} vs {1:.6e}")]
    MassMismatch(f64, f64),

    #[error("degenerate covector: {0}")]
    DegenerateCovector(String),

    #[error("chart coordinate {index} has norm {norm:.3e}, beyond radius {radius}")]
    OutOfChart {
        index: usize,
        norm: f64,
        radius: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
