//! Computation, verification, and analysis of non-free-disposal competitive
//! equilibria for finite weighted production economies with bads: commodity
//! prices may be negative, consumption of bads is capacity-bounded, nothing
//! can be discarded, preferences may carry aggregate externalities, and
//! firms may hold emission quotas traded at equilibrium rents.
//!
//! Modules:
//! * [`economy`] - the economy data model, validators, example builders, and
//!   the weighted-to-unweighted rescaling.
//! * [`preferences`] - utility families, demand, quasi-demand, and cheaper
//!   points under signed prices.
//! * [`firms`] - profit and supply analysis for cone and polytope
//!   technologies.
//! * [`solver`] - the equilibrium solver and the certificate verifier.
//! * [`quota`] - emission-quota economies: compliance targets, the shifted
//!   reduction, rents, and quota verification.
//! * [`welfare`] - Pareto comparisons, free-disposal constructions, and the
//!   improvement-search harness.
//! * [`experiments`] - closed-form oracles, family sweeps, and the
//!   uniform-integrability diagnostic.
//! * [`io`] - the JSON document formats.
//! * [`cli`] - the command-line entry points.

pub mod cli;
pub mod economy;
pub mod experiments;
pub mod firms;
pub mod io;
pub mod preferences;
pub mod quota;
pub mod solver;
pub mod vecmath;
pub mod welfare;

pub use economy::{
    build_garbage_economy, build_hara_economy, build_one_agent_economy, rescale_to_unweighted,
    validate_economy, Economy, ValidationReport,
};
pub use io::{load_economy, serialize_economy};
pub use solver::{
    solve_equilibrium, verify_equilibrium, EquilibriumCertificate, SolveError, SolverConfig,
    VerificationReport as EquilibriumReport,
};
