//! Continuous normalizing flows on an augmented `(q, p)` phase space whose
//! vector field is a truncated Taylor expansion with neural coefficients.
//! Integrating one Taylor term at a time gives closed-form, invertible
//! updates with exact log-determinants.

pub mod autodiff;
pub mod checks;
pub mod couplings;
pub mod densities;
pub mod error;
pub mod flow;
pub mod importance;
pub mod integrators;
pub mod io;
pub mod linalg;
pub mod operators;
pub mod plot;
pub mod rng;
pub mod training;

pub use error::{FlowError, Result, Side};
pub use flow::{LinearForm, PhaseBatch, PhaseState, VerletFlow};
pub use integrators::{integrate, IntegrationResult, IntegratorConfig, Method};
