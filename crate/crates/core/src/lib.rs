//! Singular time-dependent Markov triples and super Ricci flow checks.

pub mod chain;
pub mod curvature;
pub mod error;
pub mod heat;
pub mod linalg;
pub mod ode;
pub mod scenarios;
pub mod schedule;
pub mod transport;

pub use chain::{BoundaryPolicy, MarkovTriple};
pub use error::{Error, Result};
pub use scenarios::builtin_scenario;
pub use schedule::{product_flow, validate_flow, SingularFlow};
