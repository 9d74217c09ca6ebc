//! Utility families, externality hooks, and consumer demand under possibly
//! negative prices.
//!
//! Four parametric families cover the crate: `QuadraticBad`
//! (`u = x_g - c*x_b^2`), `LogMinusLinear` (`u = ln(x_g) + sign*x_b`),
//! `Linear` (`u = a.x`), and `CobbDouglas`
//! (`u = sum_i alpha_i ln(x_i + eps_i)`). An optional externality term
//! `-gamma.stat` shifts utility by an aggregate statistic of the allocation,
//! production, or price; it never depends on the consumer's own bundle, so it
//! shifts levels without changing own-bundle rankings (and therefore never
//! changes demand).
//!
//! Demand is computed in closed form for each family, with a projected
//! gradient fallback for corner configurations (finite bound on a commodity
//! whose price is nonpositive). Against negative prices the crucial error
//! mode is `Unbounded`: a commodity with an unbounded bound, a nonpositive
//! price and strictly increasing utility makes the demand set empty, which
//! signals that the candidate price cannot be an equilibrium price.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::Consumer;
use crate::vecmath::{dot, lex_less};

/// Strict-inequality margin for cheaper points.
pub const CHEAPER_MARGIN: f64 = 1e-12;

/// Tie tolerance used when `demand` picks one maximizer.
const DEMAND_TIE_TOL: f64 = 1e-12;

const FALLBACK_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum Family {
    /// `u = x_good - coefficient * x_bad^2`.
    QuadraticBad {
        good: usize,
        bad: usize,
        coefficient: f64,
    },
    /// `u = ln(x_good) + sign * x_bad`, `sign` in `{-1, +1}`.
    LogMinusLinear { good: usize, bad: usize, sign: f64 },
    /// `u = coefficients . x`.
    Linear { coefficients: Vec<f64> },
    /// `u = sum_i exponents_i * ln(x_i + shifts_i)`.
    CobbDouglas {
        exponents: Vec<f64>,
        #[serde(default)]
        shifts: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    MeanAllocation,
    TotalProduction,
    Price,
}

/// Additive externality term `-gamma . (statistic + statistic_offset)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Externality {
    pub gamma: Vec<f64>,
    pub statistic: Statistic,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistic_offset: Option<Vec<f64>>,
}

fn default_scale() -> f64 {
    1.0
}

fn scale_is_default(s: &f64) -> bool {
    *s == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSpec {
    #[serde(flatten)]
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub externality: Option<Externality>,
    /// Utility is evaluated as `family(bundle / scale)`; used by the
    /// weighted-to-unweighted rescaling so composed utilities stay in-family.
    #[serde(default = "default_scale", skip_serializing_if = "scale_is_default")]
    pub scale: f64,
}

impl PreferenceSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            externality: None,
            scale: 1.0,
        }
    }

    /// Commodity indices whose marginal utility can be nonzero.
    pub fn support(&self, ell: usize) -> Vec<usize> {
        match &self.family {
            Family::QuadraticBad { good, bad, .. } | Family::LogMinusLinear { good, bad, .. } => {
                vec![*bad, *good]
            }
            Family::Linear { coefficients } => {
                (0..ell.min(coefficients.len())).collect()
            }
            Family::CobbDouglas { exponents, .. } => (0..ell.min(exponents.len()))
                .filter(|&i| exponents[i] != 0.0)
                .collect(),
        }
    }

    /// Whether utility is strictly increasing in commodity `s` everywhere on
    /// the consumption box (used by the monotone-witness validation rule).
    pub fn strongly_monotone_in(&self, s: usize) -> bool {
        match &self.family {
            Family::QuadraticBad { good, .. } | Family::LogMinusLinear { good, .. } => *good == s,
            Family::Linear { coefficients } => coefficients.get(s).copied().unwrap_or(0.0) > 0.0,
            Family::CobbDouglas { exponents, .. } => exponents.get(s).copied().unwrap_or(0.0) > 0.0,
        }
    }

    pub fn depends_on_production(&self) -> bool {
        matches!(
            &self.externality,
            Some(Externality {
                statistic: Statistic::TotalProduction,
                ..
            })
        )
    }
}

/// The aggregate arguments a preference map may observe: the current
/// allocation's weighted mean, per-firm productions and their sum, and the
/// price vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub mean_allocation: Vec<f64>,
    pub productions: Vec<Vec<f64>>,
    pub total_production: Vec<f64>,
    pub price: Vec<f64>,
}

impl Context {
    pub fn neutral(ell: usize) -> Self {
        Self {
            mean_allocation: vec![0.0; ell],
            productions: Vec::new(),
            total_production: vec![0.0; ell],
            price: vec![0.0; ell],
        }
    }

    pub fn new(mean_allocation: Vec<f64>, productions: Vec<Vec<f64>>, price: Vec<f64>) -> Self {
        let ell = mean_allocation.len();
        let mut total = vec![0.0; ell];
        for y in &productions {
            for (t, v) in total.iter_mut().zip(y) {
                *t += v;
            }
        }
        Self {
            mean_allocation,
            productions,
            total_production: total,
            price,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreferenceError {
    #[error("family references commodity {index} but the bundle has {ell} coordinates")]
    IndexOutOfRange { index: usize, ell: usize },
    #[error("externality gamma has {gamma} entries, statistic has {stat}")]
    GammaDimension { gamma: usize, stat: usize },
    #[error("utility is not differentiable at this bundle: {0}")]
    Domain(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error(
        "demand set is empty: commodity {commodity} has unbounded consumption, nonpositive price, and strictly increasing utility"
    )]
    Unbounded { commodity: usize },
    #[error("budget set is empty: income is below the cheapest point of the consumption box")]
    EmptyBudget,
    #[error(transparent)]
    Preference(#[from] PreferenceError),
}

fn safe_ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn family_utility(family: &Family, bundle: &[f64]) -> Result<f64, PreferenceError> {
    let ell = bundle.len();
    let check = |i: usize| -> Result<(), PreferenceError> {
        if i >= ell {
            Err(PreferenceError::IndexOutOfRange { index: i, ell })
        } else {
            Ok(())
        }
    };
    match family {
        Family::QuadraticBad {
            good,
            bad,
            coefficient,
        } => {
            check(*good)?;
            check(*bad)?;
            Ok(bundle[*good] - coefficient * bundle[*bad] * bundle[*bad])
        }
        Family::LogMinusLinear { good, bad, sign } => {
            check(*good)?;
            check(*bad)?;
            Ok(safe_ln(bundle[*good]) + sign * bundle[*bad])
        }
        Family::Linear { coefficients } => {
            if coefficients.len() != ell {
                return Err(PreferenceError::IndexOutOfRange {
                    index: coefficients.len().saturating_sub(1),
                    ell,
                });
            }
            Ok(dot(coefficients, bundle))
        }
        Family::CobbDouglas { exponents, shifts } => {
            if exponents.len() != ell || (!shifts.is_empty() && shifts.len() != ell) {
                return Err(PreferenceError::IndexOutOfRange {
                    index: exponents.len().max(shifts.len()).saturating_sub(1),
                    ell,
                });
            }
            let mut u = 0.0;
            for i in 0..ell {
                if exponents[i] != 0.0 {
                    let shift = shifts.get(i).copied().unwrap_or(0.0);
                    u += exponents[i] * safe_ln(bundle[i] + shift);
                }
            }
            Ok(u)
        }
    }
}

fn externality_term(ext: &Externality, ctx: &Context) -> Result<f64, PreferenceError> {
    let stat: &[f64] = match ext.statistic {
        Statistic::MeanAllocation => &ctx.mean_allocation,
        Statistic::TotalProduction => &ctx.total_production,
        Statistic::Price => &ctx.price,
    };
    if ext.gamma.len() != stat.len() {
        return Err(PreferenceError::GammaDimension {
            gamma: ext.gamma.len(),
            stat: stat.len(),
        });
    }
    let mut term = -dot(&ext.gamma, stat);
    if let Some(offset) = &ext.statistic_offset {
        if offset.len() != ext.gamma.len() {
            return Err(PreferenceError::GammaDimension {
                gamma: ext.gamma.len(),
                stat: offset.len(),
            });
        }
        term -= dot(&ext.gamma, offset);
    }
    Ok(term)
}

/// Utility of an own bundle given the aggregate context; `-inf` is a
/// legitimate value for log families at a zero good.
pub fn utility(spec: &PreferenceSpec, bundle: &[f64], ctx: &Context) -> Result<f64, PreferenceError> {
    let base = if spec.scale == 1.0 {
        family_utility(&spec.family, bundle)?
    } else {
        let scaled: Vec<f64> = bundle.iter().map(|x| x / spec.scale).collect();
        family_utility(&spec.family, &scaled)?
    };
    let ext = match &spec.externality {
        Some(e) => externality_term(e, ctx)?,
        None => 0.0,
    };
    Ok(base + ext)
}

/// Analytic gradient of utility in the own bundle. The externality term is
/// constant in the own bundle, so it never contributes.
pub fn utility_gradient(
    spec: &PreferenceSpec,
    bundle: &[f64],
    _ctx: &Context,
) -> Result<Vec<f64>, PreferenceError> {
    let scaled: Vec<f64>;
    let point: &[f64] = if spec.scale == 1.0 {
        bundle
    } else {
        scaled = bundle.iter().map(|x| x / spec.scale).collect();
        &scaled
    };
    let ell = point.len();
    let mut g = vec![0.0; ell];
    match &spec.family {
        Family::QuadraticBad {
            good,
            bad,
            coefficient,
        } => {
            if *good >= ell || *bad >= ell {
                return Err(PreferenceError::IndexOutOfRange {
                    index: (*good).max(*bad),
                    ell,
                });
            }
            g[*good] = 1.0;
            g[*bad] += -2.0 * coefficient * point[*bad];
        }
        Family::LogMinusLinear { good, bad, sign } => {
            if *good >= ell || *bad >= ell {
                return Err(PreferenceError::IndexOutOfRange {
                    index: (*good).max(*bad),
                    ell,
                });
            }
            if point[*good] <= 0.0 {
                return Err(PreferenceError::Domain(format!(
                    "log utility is not differentiable at x[{}] = {}",
                    good, point[*good]
                )));
            }
            g[*good] = 1.0 / point[*good];
            g[*bad] += *sign;
        }
        Family::Linear { coefficients } => {
            if coefficients.len() != ell {
                return Err(PreferenceError::IndexOutOfRange {
                    index: coefficients.len().saturating_sub(1),
                    ell,
                });
            }
            g.copy_from_slice(coefficients);
        }
        Family::CobbDouglas { exponents, shifts } => {
            if exponents.len() != ell {
                return Err(PreferenceError::IndexOutOfRange {
                    index: exponents.len().saturating_sub(1),
                    ell,
                });
            }
            for i in 0..ell {
                if exponents[i] != 0.0 {
                    let shift = shifts.get(i).copied().unwrap_or(0.0);
                    let v = point[i] + shift;
                    if v <= 0.0 {
                        return Err(PreferenceError::Domain(format!(
                            "Cobb-Douglas utility is not differentiable at x[{i}] = {}",
                            point[i]
                        )));
                    }
                    g[i] = exponents[i] / v;
                }
            }
        }
    }
    if spec.scale != 1.0 {
        for gi in &mut g {
            *gi /= spec.scale;
        }
    }
    Ok(g)
}

/// Cheapest point of the consumption box at this price, if one exists; the
/// cost-minimizing coordinate pattern (zero at nonnegative prices, upper
/// bound at negative prices).
fn min_cost_point(bounds: &[f64], price: &[f64]) -> Option<(Vec<f64>, f64)> {
    let mut z = vec![0.0; price.len()];
    let mut cost = 0.0;
    for i in 0..price.len() {
        if price[i] < 0.0 {
            if bounds[i].is_infinite() {
                // Cost is unbounded below; represent by -inf.
                return None;
            }
            z[i] = bounds[i];
            cost += price[i] * bounds[i];
        }
    }
    Some((z, cost))
}

/// Some box point costing strictly less than `income - CHEAPER_MARGIN`, or
/// `None`; absence means quasi-equilibrium promotion fails for this consumer.
pub fn cheaper_point(consumer: &Consumer, price: &[f64], income: f64) -> Option<Vec<f64>> {
    let ell = price.len();
    let mut z = vec![0.0; ell];
    let mut cost = 0.0;
    let mut unbounded_negative: Option<usize> = None;
    for i in 0..ell {
        if price[i] < 0.0 {
            if consumer.bounds[i].is_finite() {
                z[i] = consumer.bounds[i];
                cost += price[i] * consumer.bounds[i];
            } else if unbounded_negative.is_none() {
                unbounded_negative = Some(i);
            }
        }
    }
    if cost < income - CHEAPER_MARGIN {
        return Some(z);
    }
    if let Some(i) = unbounded_negative {
        // One unbounded negatively-priced coordinate can push the cost as low
        // as needed.
        let deficit = cost - (income - CHEAPER_MARGIN);
        z[i] = (deficit + 1.0) / (-price[i]);
        return Some(z);
    }
    None
}

/// Demand: a maximizer of utility over the budget-box intersection. Ties are
/// broken deterministically (see `linear_demand` for the Linear family).
#[allow(clippy::only_used_in_recursion)] // ctx is part of the demand contract
pub fn demand(
    consumer: &Consumer,
    price: &[f64],
    income: f64,
    ctx: &Context,
) -> Result<Vec<f64>, DemandError> {
    let spec = &consumer.preference;
    if spec.scale != 1.0 {
        // Maximizing family(x/scale) over {p.x <= w, x in box} is the scaled
        // image of maximizing family(z) over {(p.z) <= w/scale, z in box/scale}.
        let s = spec.scale;
        let inner = Consumer {
            bounds: consumer.bounds.iter().map(|b| b / s).collect(),
            preference: PreferenceSpec {
                family: spec.family.clone(),
                externality: spec.externality.clone(),
                scale: 1.0,
            },
            ..consumer.clone()
        };
        let z = demand(&inner, price, income / s, ctx)?;
        return Ok(z.iter().map(|x| x * s).collect());
    }
    let ell = price.len();
    for &i in &spec.support(ell) {
        if i >= ell {
            return Err(PreferenceError::IndexOutOfRange { index: i, ell }.into());
        }
    }
    let (_, min_cost) = match min_cost_point(&consumer.bounds, price) {
        Some(v) => v,
        // A negatively priced unbounded coordinate makes the budget set
        // nonempty for every income; record min cost as -inf.
        None => (vec![0.0; ell], f64::NEG_INFINITY),
    };
    if min_cost > income {
        return Err(DemandError::EmptyBudget);
    }
    match &spec.family {
        Family::Linear { coefficients } => linear_demand(coefficients, &consumer.bounds, price, income),
        Family::QuadraticBad { .. } | Family::LogMinusLinear { .. } => {
            two_commodity_demand(spec, &consumer.bounds, price, income)
        }
        Family::CobbDouglas { exponents, shifts } => {
            cobb_douglas_demand(exponents, shifts, &consumer.bounds, price, income)
        }
    }
}

/// Budget feasibility plus no cheaper strictly-better point, checked by
/// comparing the bundle's utility against the demand optimum within `tol`.
pub fn is_quasi_demanded(
    consumer: &Consumer,
    bundle: &[f64],
    price: &[f64],
    income: f64,
    ctx: &Context,
    tol: f64,
) -> Result<bool, DemandError> {
    if dot(price, bundle) > income + tol {
        return Ok(false);
    }
    let best = demand(consumer, price, income, ctx)?;
    let u_best = utility(&consumer.preference, &best, ctx)?;
    let u_bundle = utility(&consumer.preference, bundle, ctx)?;
    Ok(u_bundle >= u_best - tol)
}

/// Resolve coordinates the family is indifferent about: zero consumption at
/// nonnegative prices, the upper bound at negative prices (income). An
/// unbounded negatively priced coordinate means unbounded income and an
/// empty demand set.
fn resolve_unreferenced(
    support: &[usize],
    bounds: &[f64],
    price: &[f64],
    income: f64,
) -> Result<(Vec<f64>, f64), DemandError> {
    let ell = price.len();
    let mut x = vec![0.0; ell];
    let mut residual = income;
    for i in 0..ell {
        if support.contains(&i) {
            continue;
        }
        if price[i] < 0.0 {
            if bounds[i].is_infinite() {
                return Err(DemandError::Unbounded { commodity: i });
            }
            x[i] = bounds[i];
            residual -= price[i] * bounds[i];
        }
    }
    Ok((x, residual))
}

/// Closed-form demand for the two-commodity families. With `p_g > 0` the
/// budget binds through `x_g = (w - p_b x_b)/p_g` and the problem reduces to
/// a concave one-dimensional maximization over the feasible `x_b` interval;
/// the optimum is at the family's first-order point or an interval endpoint.
fn two_commodity_demand(
    spec: &PreferenceSpec,
    bounds: &[f64],
    price: &[f64],
    income: f64,
) -> Result<Vec<f64>, DemandError> {
    let (good, bad) = match &spec.family {
        Family::QuadraticBad { good, bad, .. } | Family::LogMinusLinear { good, bad, .. } => {
            (*good, *bad)
        }
        _ => unreachable!("two_commodity_demand called on a non two-commodity family"),
    };
    let ell = price.len();
    let (mut x, w) = resolve_unreferenced(&spec.support(ell), bounds, price, income)?;
    let (pg, pb) = (price[good], price[bad]);
    let (bg, bb) = (bounds[good], bounds[bad]);

    if pg <= 0.0 {
        if bg.is_infinite() {
            // Strictly increasing in the good with a free or negative price.
            return Err(DemandError::Unbounded { commodity: good });
        }
        return fallback_demand(spec, bounds, price, income);
    }

    // Feasible x_b interval on [0, bb] with x_g(x_b) = (w - pb*x_b)/pg >= 0.
    let (mut lo, mut hi) = (0.0f64, bb);
    if pb > 0.0 {
        hi = hi.min(w / pb);
    } else if pb < 0.0 {
        lo = lo.max(w / pb);
    } else if w < 0.0 {
        return Err(DemandError::EmptyBudget);
    }
    if lo > hi {
        return Err(DemandError::EmptyBudget);
    }

    let mut candidates: Vec<f64> = vec![lo, hi];
    match &spec.family {
        Family::QuadraticBad { coefficient: c, .. } => {
            if *c > 0.0 {
                candidates.push(-pb / (2.0 * c * pg));
            }
            // c <= 0 is linear or convex in x_b: endpoints suffice.
        }
        Family::LogMinusLinear { sign, .. } => {
            // FOC of ln(w - pb*x) + sign*x: (w - pb*x) = pb/sign.
            if pb != 0.0 && pb.signum() == sign.signum() {
                candidates.push(w / pb - 1.0 / sign);
            }
        }
        _ => unreachable!(),
    }
    if bg.is_finite() && pb != 0.0 {
        // Kink where the budget-tight good consumption hits its bound.
        candidates.push((w - pg * bg) / pb);
    }

    let eval = |xb: f64| -> (f64, f64, f64) {
        let xg = ((w - pb * xb) / pg).max(0.0).min(bg);
        let u = match &spec.family {
            Family::QuadraticBad { coefficient: c, .. } => xg - c * xb * xb,
            Family::LogMinusLinear { sign, .. } => safe_ln(xg) + sign * xb,
            _ => unreachable!(),
        };
        (xb, xg, u)
    };

    let mut best: Option<(f64, f64, f64)> = None;
    for cand in candidates {
        let xb = cand.max(lo).min(hi);
        if !xb.is_finite() {
            continue;
        }
        let (xb, xg, u) = eval(xb);
        let better = match best {
            None => true,
            Some((bxb, bxg, bu)) => {
                u > bu + DEMAND_TIE_TOL
                    || ((u - bu).abs() <= DEMAND_TIE_TOL && lex_less(&[xb, xg], &[bxb, bxg]))
            }
        };
        if better {
            best = Some((xb, xg, u));
        }
    }
    let (xb, xg, _) = best.ok_or(DemandError::EmptyBudget)?;
    x[bad] = xb;
    x[good] = xg;
    Ok(x)
}

/// All vertices of `{0 <= x <= b, p.x <= w}` (box vertices satisfying the
/// budget, plus budget-plane points on box edges), deduplicated and sorted
/// lexicographically. Coordinates with infinite bounds only appear through
/// budget-plane vertices.
pub(crate) fn budget_box_vertices(
    bounds: &[f64],
    price: &[f64],
    income: f64,
) -> Result<Vec<Vec<f64>>, DemandError> {
    let ell = price.len();
    if ell > 20 {
        return Err(PreferenceError::Domain(format!(
            "vertex enumeration limited to 20 commodities, got {ell}"
        ))
        .into());
    }
    let feas_tol = 1e-12 * (1.0 + income.abs());
    let mut verts: Vec<Vec<f64>> = Vec::new();
    let mut push = |v: Vec<f64>| {
        if !verts
            .iter()
            .any(|u| u.iter().zip(&v).all(|(a, b)| (a - b).abs() <= 1e-12))
        {
            verts.push(v);
        }
    };

    // Patterns place each coordinate at 0 or its finite bound.
    let finite: Vec<usize> = (0..ell).filter(|&i| bounds[i].is_finite()).collect();
    let patterns = 1usize << finite.len();
    for mask in 0..patterns {
        let mut x = vec![0.0; ell];
        for (bit, &i) in finite.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                x[i] = bounds[i];
            }
        }
        let cost = dot(price, &x);
        if cost <= income + feas_tol {
            push(x.clone());
        }
        // Budget-plane vertex along each remaining free coordinate.
        for f in 0..ell {
            if x[f] != 0.0 || price[f] == 0.0 {
                continue;
            }
            let rest = cost - price[f] * x[f];
            let xf = (income - rest) / price[f];
            if xf >= -1e-12 && xf <= bounds[f] + 1e-12 {
                let mut v = x.clone();
                v[f] = xf.max(0.0).min(bounds[f]);
                push(v);
            }
        }
    }
    verts.sort_by(|a, b| {
        a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
    });
    if verts.is_empty() {
        return Err(DemandError::EmptyBudget);
    }
    Ok(verts)
}

/// Detects an improving recession direction of the budget-box polytope:
/// `max a.d` over `{d in [0,1]^U, p_U.d <= 0}` where `U` collects the
/// unbounded coordinates. A positive value means the demand set is empty.
fn linear_unbounded_direction(
    coefficients: &[f64],
    bounds: &[f64],
    price: &[f64],
) -> Result<Option<usize>, DemandError> {
    let unbounded: Vec<usize> = (0..price.len()).filter(|&i| bounds[i].is_infinite()).collect();
    if unbounded.is_empty() {
        return Ok(None);
    }
    let sub_bounds: Vec<f64> = vec![1.0; unbounded.len()];
    let sub_price: Vec<f64> = unbounded.iter().map(|&i| price[i]).collect();
    let sub_coeff: Vec<f64> = unbounded.iter().map(|&i| coefficients[i]).collect();
    let verts = budget_box_vertices(&sub_bounds, &sub_price, 0.0)?;
    for v in verts {
        if dot(&sub_coeff, &v) > 1e-12 {
            // Report the dominant coordinate of the improving direction.
            let arg = v
                .iter()
                .enumerate()
                .filter(|(i, &d)| d > 0.0 && sub_coeff[*i] > 0.0)
                .max_by(|a, b| {
                    (sub_coeff[a.0] * a.1)
                        .partial_cmp(&(sub_coeff[b.0] * b.1))
                        .unwrap()
                })
                .map(|(i, _)| unbounded[i])
                .unwrap_or(unbounded[0]);
            return Ok(Some(arg));
        }
    }
    Ok(None)
}

/// Linear utility optimizes at a vertex of the budget-box polytope. Among
/// tied maximizers the lexicographically greatest bundle is returned: ties
/// occur exactly when the budget line is parallel to an indifference
/// direction, and the greatest selection is the one that carries market
/// clearing in the bounded-bad economies this family appears in.
fn linear_demand(
    coefficients: &[f64],
    bounds: &[f64],
    price: &[f64],
    income: f64,
) -> Result<Vec<f64>, DemandError> {
    if coefficients.len() != price.len() {
        return Err(PreferenceError::IndexOutOfRange {
            index: coefficients.len().saturating_sub(1),
            ell: price.len(),
        }
        .into());
    }
    if let Some(i) = linear_unbounded_direction(coefficients, bounds, price)? {
        return Err(DemandError::Unbounded { commodity: i });
    }
    let verts = budget_box_vertices(bounds, price, income)?;
    let utilities: Vec<f64> = verts.iter().map(|v| dot(coefficients, v)).collect();
    let best = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut choice: Option<&Vec<f64>> = None;
    for (v, &u) in verts.iter().zip(&utilities) {
        if u >= best - DEMAND_TIE_TOL * (1.0 + best.abs()) {
            let take = match choice {
                None => true,
                Some(c) => lex_less(c, v),
            };
            if take {
                choice = Some(v);
            }
        }
    }
    Ok(choice.expect("budget_box_vertices returned at least one vertex").clone())
}

/// Optimal vertices of a Linear consumer's demand set within `tie_tol` of
/// the maximum, with the maximum utility. The solver resolves equilibrium
/// selections from this set.
pub(crate) fn linear_demand_vertices(
    coefficients: &[f64],
    bounds: &[f64],
    price: &[f64],
    income: f64,
    tie_tol: f64,
) -> Result<(Vec<Vec<f64>>, f64), DemandError> {
    if let Some(i) = linear_unbounded_direction(coefficients, bounds, price)? {
        return Err(DemandError::Unbounded { commodity: i });
    }
    let verts = budget_box_vertices(bounds, price, income)?;
    let utilities: Vec<f64> = verts.iter().map(|v| dot(coefficients, v)).collect();
    let best = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<Vec<f64>> = verts
        .into_iter()
        .zip(&utilities)
        .filter(|(_, &u)| u >= best - tie_tol * (1.0 + best.abs()))
        .map(|(v, _)| v)
        .collect();
    Ok((tied, best))
}

/// Exact clamped share solution: `x_i(lambda) = clamp(alpha_i/(lambda p_i) -
/// eps_i, 0, b_i)` with the multiplier solved piecewise on the breakpoint
/// grid where coordinates enter or leave their bounds.
fn cobb_douglas_demand(
    exponents: &[f64],
    shifts: &[f64],
    bounds: &[f64],
    price: &[f64],
    income: f64,
) -> Result<Vec<f64>, DemandError> {
    let ell = price.len();
    let support: Vec<usize> = (0..ell).filter(|&i| exponents[i] != 0.0).collect();
    let (mut x, w) = resolve_unreferenced(&support, bounds, price, income)?;
    for &i in &support {
        if exponents[i] < 0.0 {
            return Err(PreferenceError::Domain(format!(
                "Cobb-Douglas exponent {i} is negative"
            ))
            .into());
        }
        if price[i] <= 0.0 {
            if bounds[i].is_infinite() {
                return Err(DemandError::Unbounded { commodity: i });
            }
            return fallback_demand(
                &PreferenceSpec::new(Family::CobbDouglas {
                    exponents: exponents.to_vec(),
                    shifts: shifts.to_vec(),
                }),
                bounds,
                price,
                income,
            );
        }
    }
    if w < 0.0 {
        return Err(DemandError::EmptyBudget);
    }
    let shift = |i: usize| shifts.get(i).copied().unwrap_or(0.0);
    // Spend everything if the box cannot absorb the income.
    let max_spend: f64 = support
        .iter()
        .map(|&i| {
            if bounds[i].is_finite() {
                price[i] * bounds[i]
            } else {
                f64::INFINITY
            }
        })
        .sum();
    if w >= max_spend {
        for &i in &support {
            x[i] = bounds[i];
        }
        return Ok(x);
    }
    // Breakpoints in lambda where a coordinate pins to 0 or its bound.
    let mut brk: Vec<f64> = vec![];
    for &i in &support {
        if shift(i) > 0.0 {
            brk.push(exponents[i] / (price[i] * shift(i)));
        }
        if bounds[i].is_finite() {
            brk.push(exponents[i] / (price[i] * (bounds[i] + shift(i))));
        }
    }
    brk.retain(|v| v.is_finite() && *v > 0.0);
    brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    brk.dedup();
    let spend = |lambda: f64| -> f64 {
        support
            .iter()
            .map(|&i| {
                let xi = (exponents[i] / (lambda * price[i]) - shift(i))
                    .max(0.0)
                    .min(bounds[i]);
                price[i] * xi
            })
            .sum()
    };
    // Candidate multipliers: exact solve on each interval of the breakpoint
    // grid (spend is strictly decreasing piecewise-hyperbolic).
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut lo = 0.0;
    for &b in &brk {
        intervals.push((lo, b));
        lo = b;
    }
    intervals.push((lo, f64::INFINITY));
    for (a, b) in intervals {
        // Active pattern on this interval, sampled at an interior point.
        let probe = if b.is_finite() { 0.5 * (a + b) } else { a * 2.0 + 1.0 };
        let mut sum_alpha = 0.0;
        let mut fixed = 0.0;
        for &i in &support {
            let xi = exponents[i] / (probe * price[i]) - shift(i);
            if xi <= 0.0 {
                // pinned at zero
            } else if xi >= bounds[i] {
                fixed += price[i] * bounds[i];
            } else {
                sum_alpha += exponents[i];
                fixed -= price[i] * shift(i);
            }
        }
        let lambda = if sum_alpha == 0.0 {
            continue;
        } else {
            sum_alpha / (w - fixed)
        };
        if lambda > 0.0 && lambda >= a - 1e-15 && (b.is_infinite() || lambda <= b + 1e-15) {
            let check = spend(lambda);
            if (check - w).abs() <= 1e-9 * (1.0 + w.abs()) {
                for &i in &support {
                    x[i] = (exponents[i] / (lambda * price[i]) - shift(i))
                        .max(0.0)
                        .min(bounds[i]);
                }
                return Ok(x);
            }
        }
    }
    // Numerical safety net; the piecewise solve above covers every pattern.
    fallback_demand(
        &PreferenceSpec::new(Family::CobbDouglas {
            exponents: exponents.to_vec(),
            shifts: shifts.to_vec(),
        }),
        bounds,
        price,
        income,
    )
}

/// Projected gradient ascent on the budget-box intersection with
/// backtracking steps. Working bounds replace infinities so the projection
/// stays well-posed; closed forms handle every configuration the solver
/// visits, this covers the leftovers.
fn fallback_demand(
    spec: &PreferenceSpec,
    bounds: &[f64],
    price: &[f64],
    income: f64,
) -> Result<Vec<f64>, DemandError> {
    let ell = price.len();
    let finite_max = bounds
        .iter()
        .filter(|b| b.is_finite())
        .fold(1.0f64, |m, b| m.max(*b));
    let cap = 1e3 * (finite_max + income.abs() + 1.0);
    let work_bounds: Vec<f64> = bounds
        .iter()
        .map(|b| if b.is_finite() { *b } else { cap })
        .collect();
    let project = |z: &[f64]| -> Vec<f64> {
        // Dykstra alternating projections onto the box and the halfspace.
        let mut x: Vec<f64> = z.to_vec();
        let mut p_box = vec![0.0; ell];
        let mut p_half = vec![0.0; ell];
        let pp = dot(price, price);
        for _ in 0..64 {
            let mut y = vec![0.0; ell];
            for i in 0..ell {
                y[i] = (x[i] + p_box[i]).max(0.0).min(work_bounds[i]);
            }
            for i in 0..ell {
                p_box[i] = x[i] + p_box[i] - y[i];
            }
            let viol = (dot(price, &y) + dot(price, &p_half) - income).max(0.0);
            let mut x2 = vec![0.0; ell];
            for i in 0..ell {
                x2[i] = y[i] + p_half[i] - viol / pp * price[i];
            }
            for i in 0..ell {
                p_half[i] = y[i] + p_half[i] - x2[i];
            }
            x = x2;
        }
        for i in 0..ell {
            x[i] = x[i].max(0.0).min(work_bounds[i]);
        }
        x
    };
    let (start, min_cost) = min_cost_point(&work_bounds, price).expect("working bounds are finite");
    if min_cost > income {
        return Err(DemandError::EmptyBudget);
    }
    let ctx = Context::neutral(ell);
    let mut x = start;
    // Nudge into the differentiable interior for log families.
    for i in 0..ell {
        if x[i] == 0.0 {
            x[i] = (1e-9f64).min(work_bounds[i]);
        }
    }
    x = project(&x);
    let mut u = utility(spec, &x, &ctx).map_err(DemandError::Preference)?;
    for _ in 0..FALLBACK_MAX_ITERS {
        let interior: Vec<f64> = x
            .iter()
            .map(|&v| if v <= 0.0 { 1e-12 } else { v })
            .collect();
        let g = match utility_gradient(spec, &interior, &ctx) {
            Ok(g) => g,
            Err(_) => break,
        };
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + alpha * gi).collect();
            let trial = project(&trial);
            let ut = utility(spec, &trial, &ctx).map_err(DemandError::Preference)?;
            if ut > u + 1e-16 {
                x = trial;
                u = ut;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::Consumer;

    fn consumer(bounds: Vec<f64>, family: Family) -> Consumer {
        Consumer {
            id: "c".into(),
            weight: 1.0,
            endowment: vec![0.0; bounds.len()],
            shares: vec![],
            bounds,
            preference: PreferenceSpec::new(family),
        }
    }

    fn ctx2() -> Context {
        Context::neutral(2)
    }

    #[test]
    fn utility_examples() {
        // good = index 1, bad = index 0 (bads-first layout).
        let quad = PreferenceSpec::new(Family::QuadraticBad {
            good: 1,
            bad: 0,
            coefficient: 1.0,
        });
        assert_eq!(utility(&quad, &[1.0, 2.0], &ctx2()).unwrap(), 1.0);

        let log = PreferenceSpec::new(Family::LogMinusLinear {
            good: 2,
            bad: 0,
            sign: -1.0,
        });
        assert_eq!(utility(&log, &[0.0, 0.0, 1.0], &Context::neutral(3)).unwrap(), 0.0);

        let lin = PreferenceSpec::new(Family::Linear {
            coefficients: vec![1.0, -1.0],
        });
        assert_eq!(utility(&lin, &[1.0, 1.0], &ctx2()).unwrap(), 0.0);
    }

    #[test]
    fn utility_index_error() {
        let quad = PreferenceSpec::new(Family::QuadraticBad {
            good: 5,
            bad: 0,
            coefficient: 1.0,
        });
        assert!(matches!(
            utility(&quad, &[1.0, 2.0], &ctx2()),
            Err(PreferenceError::IndexOutOfRange { index: 5, ell: 2 })
        ));
    }

    #[test]
    fn gradient_examples() {
        let quad = PreferenceSpec::new(Family::QuadraticBad {
            good: 1,
            bad: 0,
            coefficient: 0.5,
        });
        let g = utility_gradient(&quad, &[2.0, 1.0], &ctx2()).unwrap();
        assert_eq!(g, vec![-2.0, 1.0]);

        let lin = PreferenceSpec::new(Family::Linear {
            coefficients: vec![0.25, -3.0],
        });
        assert_eq!(
            utility_gradient(&lin, &[0.7, 0.1], &ctx2()).unwrap(),
            vec![0.25, -3.0]
        );

        let log = PreferenceSpec::new(Family::LogMinusLinear {
            good: 1,
            bad: 0,
            sign: 1.0,
        });
        let g = utility_gradient(&log, &[0.3, 2.0], &ctx2()).unwrap();
        assert_eq!(g, vec![1.0, 0.5]);

        assert!(matches!(
            utility_gradient(&log, &[0.3, 0.0], &ctx2()),
            Err(PreferenceError::Domain(_))
        ));
    }

    #[test]
    fn hara_demand_first_order_condition() {
        // omega = 0.5; p = (-4/7, 3/7); income = p.e with e = (1, 2).
        let omega = 0.5;
        let c = consumer(
            vec![20.0, f64::INFINITY],
            Family::QuadraticBad {
                good: 1,
                bad: 0,
                coefficient: omega,
            },
        );
        let p = [-4.0 / 7.0, 3.0 / 7.0];
        let income = dot(&p, &[1.0, 2.0]);
        let x = demand(&c, &p, income, &ctx2()).unwrap();
        // x_b = -p_b/(2 c p_g) = (4/7)/(2*0.5*3/7) = 4/3.
        assert!((x[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((x[1] - 22.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn garbage_demand_pieces() {
        // Example economy: price (-1/4, 1/4, 1/2), income omega/2.
        let p = [-0.25, 0.25, 0.5];
        let piece = |omega: f64, sign: f64| -> Vec<f64> {
            let c = consumer(
                vec![omega, f64::INFINITY, f64::INFINITY],
                Family::LogMinusLinear {
                    good: 2,
                    bad: 0,
                    sign,
                },
            );
            demand(&c, &p, omega / 2.0, &Context::neutral(3)).unwrap()
        };
        // omega = 0.2 <= 1/3: bound binds, (0.2, 0, 0.3).
        let x = piece(0.2, -1.0);
        assert!((x[0] - 0.2).abs() < 1e-12 && x[1] == 0.0 && (x[2] - 0.3).abs() < 1e-12);
        // omega = 0.4 in (1/3, 1/2]: interior: (1 - 0.8, 0, 0.5).
        let x = piece(0.4, -1.0);
        assert!((x[0] - 0.2).abs() < 1e-12 && (x[2] - 0.5).abs() < 1e-12);
        // omega = 0.8 non-hoarder: zero garbage.
        let x = piece(0.8, -1.0);
        assert!(x[0] == 0.0 && (x[2] - 0.8).abs() < 1e-12);
        // hoarder omega = 0.55: garbage at the bound.
        let x = piece(0.55, 1.0);
        assert!((x[0] - 0.55).abs() < 1e-12 && (x[2] - 0.825).abs() < 1e-12);
    }

    #[test]
    fn linear_demand_tie_selects_clearing_vertex() {
        // One-agent economy in the paper's ordering: u = x1 - x2, box [0,1]^2.
        let c = consumer(
            vec![1.0, 1.0],
            Family::Linear {
                coefficients: vec![1.0, -1.0],
            },
        );
        let x = demand(&c, &[0.5, -0.5], 0.0, &ctx2()).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
    }

    #[test]
    fn linear_demand_unbounded() {
        let c = consumer(
            vec![f64::INFINITY, f64::INFINITY],
            Family::Linear {
                coefficients: vec![1.0, -1.0],
            },
        );
        // Good has positive coefficient and zero price.
        assert!(matches!(
            demand(&c, &[0.0, 1.0], 1.0, &ctx2()),
            Err(DemandError::Unbounded { commodity: 0 })
        ));
    }

    #[test]
    fn empty_budget_detected() {
        let c = consumer(
            vec![1.0, 1.0],
            Family::Linear {
                coefficients: vec![1.0, 1.0],
            },
        );
        assert_eq!(
            demand(&c, &[1.0, 1.0], -0.5, &ctx2()).unwrap_err(),
            DemandError::EmptyBudget
        );
    }

    #[test]
    fn cobb_douglas_shares() {
        let c = consumer(
            vec![f64::INFINITY, f64::INFINITY],
            Family::CobbDouglas {
                exponents: vec![0.3, 0.7],
                shifts: vec![],
            },
        );
        let x = demand(&c, &[1.0, 2.0], 10.0, &ctx2()).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-10);
        assert!((x[1] - 3.5).abs() < 1e-10);
    }

    #[test]
    fn cobb_douglas_bound_redistribution() {
        let c = consumer(
            vec![1.0, f64::INFINITY],
            Family::CobbDouglas {
                exponents: vec![0.5, 0.5],
                shifts: vec![],
            },
        );
        // Unclamped split would put 5 on each; coordinate 0 caps at 1.
        let x = demand(&c, &[1.0, 1.0], 10.0, &ctx2()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10);
        assert!((x[1] - 9.0).abs() < 1e-10);
    }

    #[test]
    fn cheaper_point_examples() {
        let c = consumer(
            vec![1.0, 1.0],
            Family::Linear {
                coefficients: vec![1.0, 1.0],
            },
        );
        // Positive income, nonnegative prices: the zero bundle is cheaper.
        assert_eq!(cheaper_point(&c, &[1.0, 1.0], 0.5), Some(vec![0.0, 0.0]));
        // Zero income, nonnegative prices: no strictly cheaper point.
        assert_eq!(cheaper_point(&c, &[1.0, 1.0], 0.0), None);
        // Negative price on a bounded bad buys room below zero.
        let c = consumer(
            vec![0.5, 1.0],
            Family::Linear {
                coefficients: vec![-1.0, 1.0],
            },
        );
        let z = cheaper_point(&c, &[-0.25, 0.25], 0.0).unwrap();
        assert_eq!(z, vec![0.5, 0.0]);
        assert!(dot(&[-0.25, 0.25], &z) < -CHEAPER_MARGIN);
    }

    #[test]
    fn quasi_demand_checks() {
        let omega = 1.0;
        let c = consumer(
            vec![20.0, f64::INFINITY],
            Family::QuadraticBad {
                good: 1,
                bad: 0,
                coefficient: omega,
            },
        );
        let p = [-4.0 / 7.0, 3.0 / 7.0];
        let income = dot(&p, &[1.0, 2.0]);
        let best = demand(&c, &p, income, &ctx2()).unwrap();
        assert!(is_quasi_demanded(&c, &best, &p, income, &ctx2(), 1e-9).unwrap());
        // Zero-bad bundle on the budget line is strictly worse.
        let zero_bad = vec![0.0, income / p[1]];
        assert!(!is_quasi_demanded(&c, &zero_bad, &p, income, &ctx2(), 1e-9).unwrap());
        // Budget violation by 2x the tolerance fails.
        let mut over = best.clone();
        over[1] += 2e-9 / p[1];
        assert!(!is_quasi_demanded(&c, &over, &p, income, &ctx2(), 1e-9).unwrap());
    }

    #[test]
    fn externality_shifts_levels_not_demand() {
        let p = [-0.25, 0.25, 0.5];
        let mut c = consumer(
            vec![0.4, f64::INFINITY, f64::INFINITY],
            Family::LogMinusLinear {
                good: 2,
                bad: 0,
                sign: -1.0,
            },
        );
        let ctx = Context::new(vec![0.1, 0.0, 0.5], vec![], p.to_vec());
        let base = demand(&c, &p, 0.2, &ctx).unwrap();
        for gamma in [1.0, 10.0] {
            c.preference.externality = Some(Externality {
                gamma: vec![gamma; 3],
                statistic: Statistic::MeanAllocation,
                statistic_offset: None,
            });
            let x = demand(&c, &p, 0.2, &ctx).unwrap();
            assert_eq!(x, base);
            // Levels do shift.
            let u = utility(&c.preference, &x, &ctx).unwrap();
            let u0 = {
                let mut plain = c.preference.clone();
                plain.externality = None;
                utility(&plain, &x, &ctx).unwrap()
            };
            assert!((u0 - u - gamma * 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_composition_matches_rescaled_formula() {
        // u'(x') = u(x'/s) demand at (p, w) equals s * demand of u at (p, w/s).
        let s = 1.5;
        let mut c = consumer(
            vec![20.0, f64::INFINITY],
            Family::QuadraticBad {
                good: 1,
                bad: 0,
                coefficient: 0.5,
            },
        );
        let p = [-4.0 / 7.0, 3.0 / 7.0];
        let base = demand(&c, &p, 1.0 / s, &ctx2()).unwrap();
        c.bounds = vec![20.0 * s, f64::INFINITY];
        c.preference.scale = s;
        let scaled = demand(&c, &p, 1.0, &ctx2()).unwrap();
        for i in 0..2 {
            assert!((scaled[i] - s * base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fallback_agrees_with_closed_form() {
        // Finite good bound with positive prices: closed form on a case the
        // fallback can also handle.
        let c = consumer(
            vec![2.0, 3.0],
            Family::CobbDouglas {
                exponents: vec![0.5, 0.5],
                shifts: vec![],
            },
        );
        let p = [1.0, 1.0];
        let exact = demand(&c, &p, 2.0, &ctx2()).unwrap();
        let approx = fallback_demand(&c.preference, &c.bounds, &p, 2.0).unwrap();
        for i in 0..2 {
            assert!((exact[i] - approx[i]).abs() < 1e-6);
        }
    }
}
