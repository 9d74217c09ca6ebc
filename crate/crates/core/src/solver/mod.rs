//! Equilibrium computation and verification.
//!
//! An equilibrium certificate is a price on the l1 sphere, one bundle per
//! consumer, and one production (with activity levels) per firm, together
//! with its residual report. `solve_equilibrium` finds certificates as zeros
//! of a clearing-plus-complementarity residual with an outer fixed point
//! over the externality context; `verify_equilibrium` checks any certificate
//! against the equilibrium conditions: budget-feasible utility-maximal
//! bundles, profit-maximal productions, exact market clearing, and the
//! cheaper-point promotion from quasi-equilibrium to equilibrium.

mod engine;
pub(crate) mod nnls;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::{validate_economy, Economy, ValidationReport};
use crate::firms::{max_profit, production_from_activities, ActivityVector};
use crate::preferences::{cheaper_point, demand, utility, Context};
use crate::vecmath::{dot, l1_norm, linf_norm};

pub(crate) use engine::{allocation_distance, analytic_directions, seed_for, sign_patterns};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub clearing_tol: f64,
    pub optimality_tol: f64,
    /// Damping of the outer externality-context update, in (0, 1].
    pub damping: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            clearing_tol: 1e-9,
            optimality_tol: 1e-8,
            damping: 0.5,
            max_outer_iters: 200,
            max_inner_iters: 500,
            restarts: 64,
            seed: 0,
        }
    }
}

/// A price on the l1 unit sphere, signs unrestricted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PriceVector(Vec<f64>);

impl PriceVector {
    /// Rescales onto the sphere; errors on the zero vector.
    pub fn normalized(v: Vec<f64>) -> Result<Self, SolveError> {
        let norm = l1_norm(&v);
        if norm <= 0.0 || !norm.is_finite() {
            return Err(SolveError::Dimension(
                "price vector must have a positive finite l1 norm".into(),
            ));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for PriceVector {
    type Error = String;

    fn try_from(v: Vec<f64>) -> Result<Self, String> {
        let norm = l1_norm(&v);
        if (norm - 1.0).abs() > 1e-12 {
            return Err(format!("price is not l1-normalized: |p| = {norm}"));
        }
        Ok(Self(v))
    }
}

impl From<PriceVector> for Vec<f64> {
    fn from(p: PriceVector) -> Self {
        p.0
    }
}

impl std::ops::Deref for PriceVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub clearing: Vec<f64>,
    pub worst_budget_violation: f64,
    pub worst_optimality_gap: f64,
    pub worst_profit_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCertificate {
    pub price: PriceVector,
    /// Bundles keyed by consumer id.
    pub bundles: BTreeMap<String, Vec<f64>>,
    pub activities: Vec<ActivityVector>,
    pub productions: Vec<Vec<f64>>,
    pub residuals: Residuals,
}

impl EquilibriumCertificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn bundle_for(&self, id: &str) -> Option<&Vec<f64>> {
        self.bundles.get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub passed: bool,
    pub worst_gap: f64,
    pub failures: Vec<String>,
}

impl ConditionReport {
    fn clean() -> Self {
        Self {
            passed: true,
            worst_gap: 0.0,
            failures: Vec::new(),
        }
    }

    fn fail(&mut self, gap: f64, who: String) {
        self.passed = false;
        self.worst_gap = self.worst_gap.max(gap);
        self.failures.push(who);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub demand_optimality: ConditionReport,
    pub profit_maximization: ConditionReport,
    pub market_clearing: ConditionReport,
    /// Quasi-to-full promotion: a strictly cheaper box point per consumer.
    pub promotion: ConditionReport,
    pub passed: bool,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("economy failed validation with {} error(s)", .0.errors().count())]
    InvalidEconomy(ValidationReport),
    #[error("no convergence: best residual {best_residual:.3e} at price {best_price:?}")]
    NoConvergence {
        best_residual: f64,
        best_price: Vec<f64>,
    },
    #[error("{0}")]
    Dimension(String),
}

/// Weighted aggregate excess demand `sum mu x - sum mu e - sum y`.
pub fn aggregate_excess(
    econ: &Economy,
    bundles: &[Vec<f64>],
    productions: &[Vec<f64>],
) -> Result<Vec<f64>, SolveError> {
    let ell = econ.ell();
    if bundles.len() != econ.consumers.len() || productions.len() != econ.firms.len() {
        return Err(SolveError::Dimension(format!(
            "{} bundles for {} consumers, {} productions for {} firms",
            bundles.len(),
            econ.consumers.len(),
            productions.len(),
            econ.firms.len()
        )));
    }
    let mut excess = vec![0.0; ell];
    for (c, x) in econ.consumers.iter().zip(bundles) {
        if x.len() != ell {
            return Err(SolveError::Dimension(format!(
                "bundle of {} has {} coordinates, expected {ell}",
                c.id,
                x.len()
            )));
        }
        for i in 0..ell {
            excess[i] += c.weight * (x[i] - c.endowment[i]);
        }
    }
    for y in productions {
        if y.len() != ell {
            return Err(SolveError::Dimension(format!(
                "production has {} coordinates, expected {ell}",
                y.len()
            )));
        }
        for i in 0..ell {
            excess[i] -= y[i];
        }
    }
    Ok(excess)
}

// ---------------------------------------------------------------------------
// Verification

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClearingMode {
    /// Non-free-disposal: demand equals supply exactly.
    Exact,
    /// Free-disposal: demand at most supply, nonnegative prices.
    FreeDisposal,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub clearing_mode: ClearingMode,
    /// Clearing target; zeros for ordinary equilibria, the compliance vector
    /// for quota equilibria.
    pub clearing_target: Option<Vec<f64>>,
    /// Lump-sum transfers added to each consumer's income, in consumer order.
    pub transfers: Option<Vec<f64>>,
    /// Per-firm income added on top of p.y (quota rents).
    pub firm_income_bonus: Option<Vec<f64>>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            clearing_mode: ClearingMode::Exact,
            clearing_target: None,
            transfers: None,
            firm_income_bonus: None,
        }
    }
}

/// Checks shape compatibility of a certificate with an economy (consumer
/// ids, commodity and firm counts) without judging its quality.
pub fn check_certificate_shape(econ: &Economy, cert: &EquilibriumCertificate) -> Result<(), String> {
    let ell = econ.ell();
    if cert.price.len() != ell {
        return Err(format!(
            "certificate price has {} coordinates, economy has {ell}",
            cert.price.len()
        ));
    }
    if cert.productions.len() != econ.firms.len() || cert.activities.len() != econ.firms.len() {
        return Err(format!(
            "certificate covers {} firms, economy has {}",
            cert.productions.len().max(cert.activities.len()),
            econ.firms.len()
        ));
    }
    for c in &econ.consumers {
        match cert.bundles.get(&c.id) {
            None => return Err(format!("certificate has no bundle for consumer {}", c.id)),
            Some(x) if x.len() != ell => {
                return Err(format!(
                    "bundle of {} has {} coordinates, expected {ell}",
                    c.id,
                    x.len()
                ))
            }
            _ => {}
        }
    }
    for (j, (firm, a)) in econ.firms.iter().zip(&cert.activities).enumerate() {
        if a.levels.len() != firm.activity_len(ell) {
            return Err(format!(
                "activity vector of firm {j} has {} levels, expected {}",
                a.levels.len(),
                firm.activity_len(ell)
            ));
        }
    }
    Ok(())
}

pub fn verify_equilibrium(
    econ: &Economy,
    cert: &EquilibriumCertificate,
    tol: f64,
) -> VerificationReport {
    verify_with_options(econ, cert, tol, &VerifyOptions::default())
}

pub fn verify_with_options(
    econ: &Economy,
    cert: &EquilibriumCertificate,
    tol: f64,
    opts: &VerifyOptions,
) -> VerificationReport {
    let ell = econ.ell();
    let price = cert.price.as_slice();
    let mut demand_rep = ConditionReport::clean();
    let mut profit_rep = ConditionReport::clean();
    let mut clearing_rep = ConditionReport::clean();
    let mut promotion_rep = ConditionReport::clean();

    if let Err(msg) = check_certificate_shape(econ, cert) {
        demand_rep.fail(f64::INFINITY, msg);
        return VerificationReport {
            demand_optimality: demand_rep,
            profit_maximization: profit_rep,
            market_clearing: clearing_rep,
            promotion: promotion_rep,
            passed: false,
        };
    }

    let bundles: Vec<&Vec<f64>> = econ
        .consumers
        .iter()
        .map(|c| cert.bundles.get(&c.id).expect("shape checked"))
        .collect();

    // Context observed by preferences at this certificate.
    let mut mean = vec![0.0; ell];
    for (c, x) in econ.consumers.iter().zip(&bundles) {
        for i in 0..ell {
            mean[i] += c.weight * x[i];
        }
    }
    let ctx = Context::new(mean, cert.productions.clone(), price.to_vec());

    // (ii) profit maximization.
    for (j, (firm, y)) in econ.firms.iter().zip(&cert.productions).enumerate() {
        let pi = max_profit(firm, price);
        if !pi.is_finite() {
            profit_rep.fail(
                f64::INFINITY,
                format!("firm {j}: max profit is unbounded at this price"),
            );
            continue;
        }
        let gap = pi - dot(price, y);
        if gap > tol {
            profit_rep.fail(gap, format!("firm {j}: profit gap {gap:.3e}"));
        } else {
            profit_rep.worst_gap = profit_rep.worst_gap.max(gap.max(0.0));
        }
    }

    // (i) quasi-demand optimality at incomes from the certified productions.
    for (idx, (c, x)) in econ.consumers.iter().zip(&bundles).enumerate() {
        let mut income = dot(price, &c.endowment);
        for (j, theta) in c.shares.iter().enumerate() {
            let mut firm_value = dot(price, &cert.productions[j]);
            if let Some(bonus) = &opts.firm_income_bonus {
                firm_value += bonus[j];
            }
            income += theta * firm_value;
        }
        if let Some(transfers) = &opts.transfers {
            income += transfers[idx];
        }
        let budget_gap = dot(price, x) - income;
        if budget_gap > tol {
            demand_rep.fail(budget_gap, format!("{}: budget violated by {budget_gap:.3e}", c.id));
        } else {
            demand_rep.worst_budget(budget_gap);
        }
        match demand(c, price, income, &ctx) {
            Ok(best) => {
                let ub = utility(&c.preference, &best, &ctx).unwrap_or(f64::NEG_INFINITY);
                let ux = utility(&c.preference, x, &ctx).unwrap_or(f64::NEG_INFINITY);
                let gap = ub - ux;
                if gap > tol {
                    demand_rep.fail(gap, format!("{}: optimality gap {gap:.3e}", c.id));
                } else {
                    demand_rep.worst_gap = demand_rep.worst_gap.max(gap.max(0.0));
                }
            }
            Err(e) => {
                demand_rep.fail(f64::INFINITY, format!("{}: demand undefined ({e})", c.id));
            }
        }
        // Promotion: a strictly cheaper point in the consumption box.
        if cheaper_point(c, price, income).is_none() {
            promotion_rep.fail(0.0, format!("{}: no strictly cheaper box point", c.id));
        }
    }

    // (iii) clearing against the target.
    let owned: Vec<Vec<f64>> = bundles.iter().map(|x| (*x).clone()).collect();
    match aggregate_excess(econ, &owned, &cert.productions) {
        Ok(excess) => {
            let target = opts
                .clearing_target
                .clone()
                .unwrap_or_else(|| vec![0.0; ell]);
            match opts.clearing_mode {
                ClearingMode::Exact => {
                    let gap = excess
                        .iter()
                        .zip(&target)
                        .fold(0.0f64, |m, (e, t)| m.max((e - t).abs()));
                    if gap > tol {
                        clearing_rep.fail(gap, format!("max clearing residual {gap:.3e}"));
                    } else {
                        clearing_rep.worst_gap = gap;
                    }
                }
                ClearingMode::FreeDisposal => {
                    let gap = excess
                        .iter()
                        .zip(&target)
                        .fold(0.0f64, |m, (e, t)| m.max(e - t));
                    if gap > tol {
                        clearing_rep.fail(gap, format!("excess demand {gap:.3e} above supply"));
                    } else {
                        clearing_rep.worst_gap = gap.max(0.0);
                    }
                    let neg = price.iter().fold(0.0f64, |m, p| m.max(-p));
                    if neg > tol {
                        clearing_rep.fail(
                            neg,
                            format!("free-disposal price has a negative coordinate (-{neg:.3e})"),
                        );
                    }
                }
            }
        }
        Err(e) => clearing_rep.fail(f64::INFINITY, e.to_string()),
    }

    let passed =
        demand_rep.passed && profit_rep.passed && clearing_rep.passed && promotion_rep.passed;
    VerificationReport {
        demand_optimality: demand_rep,
        profit_maximization: profit_rep,
        market_clearing: clearing_rep,
        promotion: promotion_rep,
        passed,
    }
}

impl ConditionReport {
    fn worst_budget(&mut self, gap: f64) {
        self.worst_gap = self.worst_gap.max(gap.max(0.0));
    }
}

// ---------------------------------------------------------------------------
// Solving

/// Builds a certificate from a price, per-consumer bundles (in economy
/// order), and per-firm activity levels: productions and the residual block
/// are derived. The price is l1-normalized on the way in.
pub fn build_certificate(
    econ: &Economy,
    price: Vec<f64>,
    bundles: &[Vec<f64>],
    activities: &[Vec<f64>],
) -> Result<EquilibriumCertificate, SolveError> {
    let price = PriceVector::normalized(price)?;
    let p = price.as_slice();
    let mut productions = Vec::with_capacity(econ.firms.len());
    for (firm, levels) in econ.firms.iter().zip(activities) {
        let y = production_from_activities(firm, &ActivityVector::new(levels.clone()))
            .map_err(|e| SolveError::Dimension(e.to_string()))?;
        productions.push(y);
    }
    let clearing = aggregate_excess(econ, bundles, &productions)?;

    let ell = econ.ell();
    let mut mean = vec![0.0; ell];
    for (c, x) in econ.consumers.iter().zip(bundles) {
        for i in 0..ell {
            mean[i] += c.weight * x[i];
        }
    }
    let ctx = Context::new(mean, productions.clone(), p.to_vec());
    let mut worst_budget: f64 = 0.0;
    let mut worst_opt: f64 = 0.0;
    for (c, x) in econ.consumers.iter().zip(bundles) {
        let income = dot(p, &c.endowment)
            + c.shares
                .iter()
                .zip(&productions)
                .map(|(t, y)| t * dot(p, y))
                .sum::<f64>();
        worst_budget = worst_budget.max(dot(p, x) - income);
        let gap = match demand(c, p, income, &ctx) {
            Ok(best) => {
                utility(&c.preference, &best, &ctx).unwrap_or(f64::NEG_INFINITY)
                    - utility(&c.preference, x, &ctx).unwrap_or(f64::NEG_INFINITY)
            }
            Err(_) => f64::INFINITY,
        };
        worst_opt = worst_opt.max(gap);
    }
    let mut worst_profit: f64 = 0.0;
    for (firm, y) in econ.firms.iter().zip(&productions) {
        let pi = max_profit(firm, p);
        worst_profit = worst_profit.max(pi - dot(p, y));
    }

    let bundles_map: BTreeMap<String, Vec<f64>> = econ
        .consumers
        .iter()
        .zip(bundles)
        .map(|(c, x)| (c.id.clone(), x.clone()))
        .collect();
    Ok(EquilibriumCertificate {
        price,
        bundles: bundles_map,
        activities: activities.iter().map(|a| ActivityVector::new(a.clone())).collect(),
        productions,
        residuals: Residuals {
            clearing,
            worst_budget_violation: worst_budget.max(0.0),
            worst_optimality_gap: worst_opt.max(0.0),
            worst_profit_gap: worst_profit.max(0.0),
        },
    })
}

/// (price, bundles, activity levels, residual 2-norm) of a solve candidate.
type Candidate = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, f64);

struct InnerOutcome {
    cert: EquilibriumCertificate,
    price: Vec<f64>,
    bundles: Vec<Vec<f64>>,
}

fn inner_solve(
    econ: &Economy,
    ctx: &Context,
    cfg: &SolverConfig,
    warm: Option<&[f64]>,
    best: &mut Option<(f64, Vec<f64>)>,
) -> Option<InnerOutcome> {
    let accept_gate = 1e-6f64.max(cfg.clearing_tol);
    let try_candidate = |price: &[f64],
                         eval: &engine::Evaluation,
                         best: &mut Option<(f64, Vec<f64>)>|
     -> Option<InnerOutcome> {
        if best.as_ref().is_none_or(|(n, _)| eval.norm2 < *n) {
            *best = Some((eval.norm2, price.to_vec()));
        }
        if eval.norm_inf > accept_gate {
            return None;
        }
        // Polish to machine precision, then gate on full verification.
        let mut candidates: Vec<Candidate> = Vec::new();
        if let Some(refined) = engine::polish(econ, ctx, price, eval) {
            candidates.push((
                refined.price,
                refined.bundles,
                refined.activities,
                refined.norm2,
            ));
        }
        candidates.push((
            price.to_vec(),
            eval.bundles.clone(),
            eval.activities.clone(),
            eval.norm2,
        ));
        for (p, bundles, activities, norm2) in candidates {
            if best.as_ref().is_none_or(|(n, _)| norm2 < *n) {
                *best = Some((norm2, p.clone()));
            }
            let Ok(cert) = build_certificate(econ, p.clone(), &bundles, &activities) else {
                continue;
            };
            let report = verify_equilibrium(econ, &cert, cfg.optimality_tol.max(cfg.clearing_tol));
            if report.passed && linf_norm(&cert.residuals.clearing) <= cfg.clearing_tol {
                return Some(InnerOutcome {
                    cert,
                    price: p,
                    bundles,
                });
            }
        }
        None
    };

    if let Some(w) = warm {
        let pattern: Vec<f64> = w.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();
        if let Some(run) = engine::gauss_newton(econ, ctx, &pattern, w, cfg.max_inner_iters) {
            if let Some(out) = try_candidate(&run.price, &run.eval, best) {
                return Some(out);
            }
        }
    }

    let patterns = sign_patterns(econ.ell());
    let analytic = analytic_directions(econ);
    for restart in 0..cfg.restarts {
        let pattern = &patterns[restart % patterns.len()];
        let draw = restart / patterns.len();
        let start = seed_for(econ, &analytic, pattern, draw, cfg.seed);
        let Some(run) = engine::gauss_newton(econ, ctx, pattern, &start, cfg.max_inner_iters)
        else {
            continue;
        };
        if let Some(out) = try_candidate(&run.price, &run.eval, best) {
            return Some(out);
        }
    }
    None
}

/// Finds a non-free-disposal equilibrium. The outer loop freezes the
/// externality context, solves the inner price system by multi-start damped
/// Gauss-Newton, and iterates the context with damping until successive
/// allocations agree in weighted l1; families without externality hooks
/// settle after a single inner solve. Every returned certificate has already
/// passed `verify_equilibrium` at the configured tolerances.
pub fn solve_equilibrium(
    econ: &Economy,
    cfg: &SolverConfig,
) -> Result<EquilibriumCertificate, SolveError> {
    let report = validate_economy(econ);
    if !report.passed {
        return Err(SolveError::InvalidEconomy(report));
    }
    let ell = econ.ell();
    let mut ctx = Context::new(
        econ.total_endowment(),
        econ.firms.iter().map(|f| f.offset.clone()).collect(),
        vec![1.0 / ell as f64; ell],
    );
    let has_ext = econ.has_externalities();
    let mut warm: Option<Vec<f64>> = None;
    let mut prev_alloc: Option<Vec<Vec<f64>>> = None;
    let mut best: Option<(f64, Vec<f64>)> = None;

    for _outer in 0..cfg.max_outer_iters.max(1) {
        let Some(sol) = inner_solve(econ, &ctx, cfg, warm.as_deref(), &mut best) else {
            break;
        };
        let settled = match &prev_alloc {
            None => !has_ext,
            Some(prev) => allocation_distance(econ, prev, &sol.bundles) < cfg.clearing_tol,
        };
        if settled {
            return Ok(sol.cert);
        }
        // Damped context update from the new allocation and productions.
        let mut mean = vec![0.0; ell];
        for (c, x) in econ.consumers.iter().zip(&sol.bundles) {
            for i in 0..ell {
                mean[i] += c.weight * x[i];
            }
        }
        let d = cfg.damping;
        let new_productions: Vec<Vec<f64>> = if ctx.productions.len() == sol.cert.productions.len()
        {
            ctx.productions
                .iter()
                .zip(&sol.cert.productions)
                .map(|(old, new)| {
                    old.iter().zip(new).map(|(o, n)| (1.0 - d) * o + d * n).collect()
                })
                .collect()
        } else {
            sol.cert.productions.clone()
        };
        let blended_mean: Vec<f64> = ctx
            .mean_allocation
            .iter()
            .zip(&mean)
            .map(|(o, n)| (1.0 - d) * o + d * n)
            .collect();
        ctx = Context::new(blended_mean, new_productions, sol.price.clone());
        warm = Some(sol.price);
        prev_alloc = Some(sol.bundles);
    }

    let (best_residual, best_price) = best.unwrap_or((f64::INFINITY, vec![0.0; ell]));
    Err(SolveError::NoConvergence {
        best_residual,
        best_price,
    })
}

// ---------------------------------------------------------------------------
// Diagnostic scan

#[derive(Debug, Clone, Serialize)]
pub struct ScanPoint {
    pub price: Vec<f64>,
    pub residual_norm: f64,
}

/// Evaluates the inner residual over a dense grid on the l1 sphere (all sign
/// patterns, simplex grid of the given resolution per pattern). A diagnostic
/// for locating candidate zeros and exploring nonexistence.
pub fn excess_map_scan(econ: &Economy, resolution: usize) -> Result<Vec<ScanPoint>, SolveError> {
    let ell = econ.ell();
    if ell > 3 {
        return Err(SolveError::Dimension(format!(
            "dense scans support at most 3 commodities, economy has {ell}"
        )));
    }
    if resolution < 2 {
        return Err(SolveError::Dimension("resolution must be at least 2".into()));
    }
    let ctx = Context::new(
        econ.total_endowment(),
        econ.firms.iter().map(|f| f.offset.clone()).collect(),
        vec![1.0 / ell as f64; ell],
    );
    let steps = resolution - 1;
    let mut grid: Vec<Vec<f64>> = Vec::new();
    let mut stack = vec![(Vec::<usize>::new(), 0usize)];
    while let Some((prefix, used)) = stack.pop() {
        if prefix.len() == ell - 1 {
            let mut q: Vec<f64> = prefix.iter().map(|&i| i as f64 / steps as f64).collect();
            q.push((steps - used) as f64 / steps as f64);
            grid.push(q);
            continue;
        }
        for i in 0..=(steps - used) {
            let mut next = prefix.clone();
            next.push(i);
            stack.push((next, used + i));
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut points = Vec::new();
    for pattern in sign_patterns(ell) {
        for q in &grid {
            let price: Vec<f64> = q.iter().zip(&pattern).map(|(v, s)| v * s).collect();
            if l1_norm(&price) < 0.5 {
                continue;
            }
            let norm = match engine::evaluate(econ, &ctx, &price) {
                Ok(eval) => eval.norm2,
                Err(_) => f64::INFINITY,
            };
            points.push(ScanPoint {
                price,
                residual_norm: norm,
            });
        }
    }
    Ok(points)
}
