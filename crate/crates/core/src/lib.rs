//! Quasi-maximum-likelihood estimation of GARCH-type volatility models and a
//! fixed-design residual bootstrap test for the finiteness of E[ε^{2m}].
//!
//! The crate is organised around the estimation pipeline:
//!
//! - [`model`]: specifications, simulation, volatility filtering, residual moments
//! - [`spectral`]: the companion matrices A(θ,η), Kronecker powers and τ(θ, μ)
//! - [`qml`]: unconstrained and τ-constrained QML fits, covariance blocks
//! - [`bootstrap`]: joint (θ̂, μ̂) bootstrap and the moment-existence test
//! - [`montecarlo`]: rejection-frequency experiments and density exports
//! - [`io`]: CSV ingestion, reports and experiment configuration files

pub mod bootstrap;
pub mod error;
pub mod io;
pub mod model;
pub mod montecarlo;
pub mod optim;
pub mod parallel;
pub mod qml;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{Family, ModelSpec, MomentVector, ParamVector, ReturnSeries, VolatilityPath};
pub use parallel::Execution;
pub use spectral::SpectralMode;
