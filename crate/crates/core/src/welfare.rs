//! Welfare comparisons and free-disposal constructions: Pareto dominance,
//! the nonnegative-price rule for free-disposal technologies, the disguise
//! of a free-disposal equilibrium as a non-free-disposal one, the
//! transfer-supported free-disposal equilibria of the quadratic-bad family,
//! and a randomized search for Pareto improvements (a falsification harness
//! for first-welfare-theorem instances, not a proof).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::economy::{Economy, EconomyError};
use crate::firms::TechnologyKind;
use crate::preferences::{utility, Context, PreferenceError};
use crate::solver::{build_certificate, EquilibriumCertificate, PriceVector, SolveError};
use crate::vecmath::{dot, harmonic, KahanSum};

/// Strictness margin for Pareto comparisons.
const DOMINANCE_MARGIN: f64 = 1e-12;

/// Two allocations over the same economy; `first` is the candidate the
/// search found, `second` the baseline it dominates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationPair {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum DisguiseError {
    #[error("no firm has free disposal in production")]
    NoFreeDisposalFirm,
    #[error("excess supply is negative in commodity {commodity} ({value:.3e}): not a free-disposal equilibrium")]
    NegativeExcessSupply { commodity: usize, value: f64 },
    #[error("the value of the excess supply is {value:.3e}, not zero")]
    ExcessSupplyValue { value: f64 },
    #[error("preferences depend on production; the disguise changes what consumers observe")]
    ProductionDependentPreferences,
    #[error("certificate does not fit the economy: {0}")]
    Shape(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Per-consumer utilities of an allocation, each consumer evaluated under
/// the context generated by that allocation.
pub fn utilities_under(
    econ: &Economy,
    alloc: &[Vec<f64>],
    productions: &[Vec<f64>],
    price: &[f64],
) -> Result<Vec<f64>, PreferenceError> {
    let ell = econ.ell();
    let mut mean = vec![0.0; ell];
    for (c, x) in econ.consumers.iter().zip(alloc) {
        for i in 0..ell {
            mean[i] += c.weight * x[i];
        }
    }
    let ctx = Context::new(mean, productions.to_vec(), price.to_vec());
    econ.consumers
        .iter()
        .zip(alloc)
        .map(|(c, x)| utility(&c.preference, x, &ctx))
        .collect()
}

/// Weak improvement for everyone and strict improvement (margin 1e-12) for
/// someone, each allocation judged under its own context. An allocation
/// never dominates itself.
pub fn pareto_dominates(
    econ: &Economy,
    alloc_a: &[Vec<f64>],
    alloc_b: &[Vec<f64>],
) -> Result<bool, PreferenceError> {
    let ua = utilities_under(econ, alloc_a, &[], &[])?;
    let ub = utilities_under(econ, alloc_b, &[], &[])?;
    let weakly_better = ua.iter().zip(&ub).all(|(a, b)| a >= b);
    let strictly_somewhere = ua.iter().zip(&ub).any(|(a, b)| a - b > DOMINANCE_MARGIN);
    Ok(weakly_better && strictly_somewhere)
}

/// If any firm can freely dispose, an equilibrium price must be nonnegative
/// componentwise; economies without free disposal pass vacuously.
pub fn check_nonnegative_price_rule(econ: &Economy, cert: &EquilibriumCertificate) -> bool {
    let has_free_disposal = econ
        .firms
        .iter()
        .any(|f| f.kind == TechnologyKind::ConeRays && f.free_disposal);
    if !has_free_disposal {
        return true;
    }
    cert.price.iter().all(|p| *p >= 0.0)
}

/// Converts a free-disposal equilibrium into a non-free-disposal one by
/// folding the excess supply `w = sum(mu e) + sum(y) - sum(mu x)` into a
/// free-disposal firm's production. Requires `p.w = 0` (budget-exhausting
/// consumers) and production-independent preferences; then budgets, demands,
/// and profits are untouched and the new production clears exactly.
pub fn disguise_free_disposal(
    econ: &Economy,
    fd_cert: &EquilibriumCertificate,
    tol: f64,
) -> Result<EquilibriumCertificate, DisguiseError> {
    crate::solver::check_certificate_shape(econ, fd_cert).map_err(DisguiseError::Shape)?;
    if econ
        .consumers
        .iter()
        .any(|c| c.preference.depends_on_production())
    {
        return Err(DisguiseError::ProductionDependentPreferences);
    }
    let ell = econ.ell();
    let fd_firm = econ
        .firms
        .iter()
        .position(|f| f.kind == TechnologyKind::ConeRays && f.free_disposal)
        .ok_or(DisguiseError::NoFreeDisposalFirm)?;

    // Excess supply of the free-disposal certificate.
    let mut w = vec![0.0; ell];
    for (c, _) in econ.consumers.iter().zip(0..) {
        let x = &fd_cert.bundles[&c.id];
        for i in 0..ell {
            w[i] += c.weight * (c.endowment[i] - x[i]);
        }
    }
    for y in &fd_cert.productions {
        for i in 0..ell {
            w[i] += y[i];
        }
    }
    for (i, v) in w.iter().enumerate() {
        if *v < -tol {
            return Err(DisguiseError::NegativeExcessSupply {
                commodity: i,
                value: *v,
            });
        }
    }
    let value = dot(fd_cert.price.as_slice(), &w);
    if value.abs() > tol {
        return Err(DisguiseError::ExcessSupplyValue { value });
    }

    // Push the excess onto the firm's disposal rays: y' = y - w.
    let mut activities: Vec<Vec<f64>> = fd_cert.activities.iter().map(|a| a.levels.clone()).collect();
    let explicit = econ.firms[fd_firm].generators.len();
    for i in 0..ell {
        activities[fd_firm][explicit + i] += w[i].max(0.0);
    }
    let bundles: Vec<Vec<f64>> = econ
        .consumers
        .iter()
        .map(|c| fd_cert.bundles[&c.id].clone())
        .collect();
    let cert = build_certificate(
        econ,
        fd_cert.price.as_slice().to_vec(),
        &bundles,
        &activities,
    )?;
    Ok(cert)
}

/// A free-disposal equilibrium with transfers for the quadratic-bad family
/// of size n: price puts zero on the bad, transfers
/// `T(omega) = (2/S)(1/(S omega) - 1)` sum to zero, and every consumer
/// receives the bad-free bundle with the same good consumption as in the
/// non-free-disposal equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferEquilibrium {
    pub price: PriceVector,
    /// Per consumer, in builder order.
    pub transfers: Vec<f64>,
    pub allocation: Vec<Vec<f64>>,
}

pub fn hara_transfer_equilibrium(n: usize) -> Result<TransferEquilibrium, EconomyError> {
    if n == 0 {
        return Err(EconomyError::Domain("economy size n must be positive".into()));
    }
    let s = harmonic(n);
    let mut transfers = Vec::with_capacity(n);
    let mut allocation = Vec::with_capacity(n);
    for i in 1..=n {
        let omega = i as f64 / n as f64;
        let t = (2.0 / s) * (1.0 / (s * omega) - 1.0);
        transfers.push(t);
        // Internal order (bad, good): the bad is discarded entirely.
        allocation.push(vec![0.0, 2.0 + t]);
    }
    Ok(TransferEquilibrium {
        price: PriceVector::normalized(vec![0.0, 1.0]).expect("unit vector"),
        transfers,
        allocation,
    })
}

#[derive(Debug, Clone, Copy)]
struct SampleSpec {
    samples: usize,
    seed: u64,
}

const CHUNK: usize = 1024;

/// Draws random feasible reallocation-plus-production perturbations
/// (clearing kept at-most-supply componentwise) and returns the first
/// dominating allocation by sample index, or `None`. Under the
/// first-welfare-theorem hypotheses (externality-free preferences,
/// nonnegative certificate price) absence is the expected outcome; this is
/// evidence, not proof.
pub fn search_pareto_improvement(
    econ: &Economy,
    cert: &EquilibriumCertificate,
    samples: usize,
    seed: u64,
) -> Option<AllocationPair> {
    if samples == 0 {
        return None;
    }
    let baseline: Vec<Vec<f64>> = econ
        .consumers
        .iter()
        .map(|c| cert.bundles[&c.id].clone())
        .collect();
    let base_utilities = utilities_under(econ, &baseline, &[], &[]).ok()?;
    let spec = SampleSpec { samples, seed };

    let chunks = samples.div_ceil(CHUNK);
    let hit: Option<(usize, Vec<Vec<f64>>)> = (0..chunks)
        .into_par_iter()
        .filter_map(|chunk| try_chunk(econ, cert, &base_utilities, spec, chunk))
        .min_by_key(|(index, _)| *index);
    let (_, improving) = hit?;
    // Dominance re-check; the search never returns an allocation that fails
    // its own test.
    if !pareto_dominates(econ, &improving, &baseline).unwrap_or(false) {
        return None;
    }
    Some(AllocationPair {
        first: improving,
        second: baseline,
    })
}

fn try_chunk(
    econ: &Economy,
    cert: &EquilibriumCertificate,
    base_utilities: &[f64],
    spec: SampleSpec,
    chunk: usize,
) -> Option<(usize, Vec<Vec<f64>>)> {
    let salt = (chunk as u64).wrapping_mul(0x9E3779B97F4A7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt);
    let first = chunk * CHUNK;
    let last = (first + CHUNK).min(spec.samples);
    for index in first..last {
        if let Some(candidate) = draw_candidate(econ, cert, &mut rng) {
            let better = match utilities_under(econ, &candidate, &[], &[]) {
                Ok(u) => {
                    u.iter().zip(base_utilities).all(|(a, b)| a >= b)
                        && u.iter()
                            .zip(base_utilities)
                            .any(|(a, b)| a - b > DOMINANCE_MARGIN)
                }
                Err(_) => false,
            };
            if better {
                return Some((index, candidate));
            }
        }
    }
    None
}

/// One Dirichlet-weighted redistribution of each commodity plus a uniform
/// perturbation of activity levels, projected into boxes and clamped to keep
/// aggregate demand at most aggregate supply.
fn draw_candidate(
    econ: &Economy,
    cert: &EquilibriumCertificate,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Vec<f64>>> {
    let ell = econ.ell();
    let n = econ.consumers.len();

    // Perturbed productions through scaled activity levels.
    let mut totals = econ.total_endowment();
    for (firm, acts) in econ.firms.iter().zip(&cert.activities) {
        let scaled: Vec<f64> = acts
            .levels
            .iter()
            .map(|a| a * (0.5 + rng.random::<f64>()))
            .collect();
        let y = crate::firms::production_from_activities(
            firm,
            &crate::firms::ActivityVector::new(scaled),
        )
        .ok()?;
        for i in 0..ell {
            totals[i] += y[i];
        }
    }
    if totals.iter().any(|t| *t < 0.0) {
        return None;
    }

    // Dirichlet weights per commodity, with a random utilization factor:
    // under free disposal a candidate may leave part of the supply unused.
    let mut alloc = vec![vec![0.0; ell]; n];
    for i in 0..ell {
        let utilization = rng.random::<f64>();
        let draws: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total_draw: f64 = draws.iter().sum();
        if total_draw <= 0.0 {
            return None;
        }
        for (k, c) in econ.consumers.iter().enumerate() {
            let share = draws[k] / total_draw;
            alloc[k][i] = (share * utilization * totals[i] / c.weight).min(c.bounds[i]);
        }
    }
    Some(alloc)
}

/// Aggregate utilitarian sums of an allocation, both weighted by consumer
/// mass and unweighted.
pub fn aggregate_utilities(
    econ: &Economy,
    alloc: &[Vec<f64>],
) -> Result<(f64, f64), PreferenceError> {
    let us = utilities_under(econ, alloc, &[], &[])?;
    let mut weighted = KahanSum::new();
    let mut plain = KahanSum::new();
    for (c, u) in econ.consumers.iter().zip(&us) {
        weighted.add(c.weight * u);
        plain.add(*u);
    }
    Ok((weighted.value(), plain.value()))
}
