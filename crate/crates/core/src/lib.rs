//! Numerical toolkit for the large deviations of attractive Brownian particles
//! and the upper tail of the KPZ equation.
//!
//! The library is organized around five subsystems:
//!
//! - [`measure`]: atomic measures on the line with CDF/quantile calculus,
//!   the pairwise-drift operator `Sgn`, Wasserstein and weak metrics,
//!   mass splitting, scaling, and barycenter cluster approximation.
//! - [`cluster`]: event-driven inertia-cluster (sticky particle) dynamics
//!   with momentum-conserving merges, branch extraction, and the
//!   drift-corrected optimal deviation.
//! - [`rate`]: the quantile-form rate functional on clustering deviations,
//!   the moment functional, transition costs, and the moment Lyapunov
//!   exponent `L_SHE`.
//! - [`shape`]: terminal shape functions above the parabola `-x^2/(2t)`,
//!   the KPZ upper-tail rate function `I_KPZ` with its gradient and inverse,
//!   backward Hopf-Lax evolution, Rankine-Hugoniot shock tracking, and the
//!   Legendre duality between `I_KPZ` and `L_SHE`.
//! - [`sde`]: Euler-Maruyama simulation of the attractive particle system
//!   with a seeded, replica-parallel Monte Carlo harness.
//!
//! All values are immutable after construction and all operations are pure
//! functions, so everything here is safe to use across threads.

pub mod cluster;
pub mod measure;
pub mod rate;
pub mod sde;
pub mod shape;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
