//! The finite weighted production economy: commodity layout, consumers,
//! firms, assumption validators, example builders, and the
//! weighted-to-unweighted rescaling.
//!
//! Commodity layout convention: bads occupy coordinates `0..bad_count`.
//! Builders that mirror two-commodity text examples therefore permute the
//! conventional good-first ordering; the commodity `labels` record which
//! coordinate is which.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firms::{Technology, TechnologyKind};
use crate::preferences::{Family, PreferenceSpec};
use crate::vecmath::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommoditySpace {
    /// Number of commodities.
    pub ell: usize,
    /// The first `bad_count` commodities are bads.
    pub bad_count: usize,
    /// The first `regulated_count` commodities are quota-regulated.
    pub regulated_count: usize,
    pub labels: Vec<String>,
}

impl CommoditySpace {
    pub fn new(ell: usize, bad_count: usize, labels: Vec<String>) -> Self {
        Self {
            ell,
            bad_count,
            regulated_count: 0,
            labels,
        }
    }

    pub fn goods(&self) -> impl Iterator<Item = usize> + '_ {
        self.bad_count..self.ell
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consumer {
    pub id: String,
    /// Probability weight mu({omega}).
    pub weight: f64,
    pub endowment: Vec<f64>,
    /// Shareholding per firm.
    pub shares: Vec<f64>,
    /// Consumption box upper bounds; `f64::INFINITY` for unbounded
    /// coordinates. Bad coordinates must be finite.
    pub bounds: Vec<f64>,
    pub preference: PreferenceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Economy {
    pub commodities: CommoditySpace,
    pub consumers: Vec<Consumer>,
    pub firms: Vec<Technology>,
    /// For each good index, the consumers declared strongly monotone in it.
    pub monotone_witnesses: BTreeMap<usize, Vec<String>>,
}

impl Economy {
    pub fn ell(&self) -> usize {
        self.commodities.ell
    }

    pub fn consumer_index(&self, id: &str) -> Option<usize> {
        self.consumers.iter().position(|c| c.id == id)
    }

    pub fn total_endowment(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.ell()];
        for c in &self.consumers {
            for (t, e) in total.iter_mut().zip(&c.endowment) {
                *t += c.weight * e;
            }
        }
        total
    }

    pub fn has_externalities(&self) -> bool {
        self.consumers
            .iter()
            .any(|c| c.preference.externality.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub rule: String,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Error)
    }
}

#[derive(Debug, Error)]
pub enum EconomyError {
    #[error("malformed economy document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("consumer {0} has zero weight; the rescaling excludes zero-weight consumers")]
    ZeroWeight(String),
}

// ---------------------------------------------------------------------------
// Validation

struct Report(Vec<Finding>);

impl Report {
    fn error(&mut self, rule: &str, message: String) {
        self.0.push(Finding {
            rule: rule.into(),
            severity: Severity::Error,
            message,
        });
    }

    fn warning(&mut self, rule: &str, message: String) {
        self.0.push(Finding {
            rule: rule.into(),
            severity: Severity::Warning,
            message,
        });
    }
}

/// Checks the data against the assumptions the equilibrium theory needs:
/// probability weights, unit share columns, finite bad bounds, declared
/// monotone witnesses per good, survival feasibility of each endowment, and
/// necessary conditions for pointedness of the aggregate production cone.
pub fn validate_economy(econ: &Economy) -> ValidationReport {
    let mut rep = Report(Vec::new());
    let ell = econ.ell();
    let k = econ.commodities.bad_count;

    if econ.commodities.bad_count > ell || econ.commodities.regulated_count > ell {
        rep.error(
            "commodity-counts",
            format!(
                "bad_count {} and regulated_count {} must be at most ell {}",
                econ.commodities.bad_count, econ.commodities.regulated_count, ell
            ),
        );
    }
    if econ.commodities.labels.len() != ell {
        rep.error(
            "commodity-labels",
            format!("{} labels for {} commodities", econ.commodities.labels.len(), ell),
        );
    }

    // Dimension consistency for hand-built economies.
    for c in &econ.consumers {
        if c.endowment.len() != ell || c.bounds.len() != ell {
            rep.error(
                "dimensions",
                format!("consumer {} has endowment/bounds of the wrong length", c.id),
            );
        }
        if c.shares.len() != econ.firms.len() {
            rep.error(
                "dimensions",
                format!(
                    "consumer {} has {} share entries for {} firms",
                    c.id,
                    c.shares.len(),
                    econ.firms.len()
                ),
            );
        }
        if c.weight < 0.0 || c.endowment.iter().any(|v| *v < 0.0) || c.shares.iter().any(|v| *v < 0.0)
        {
            rep.error(
                "nonnegativity",
                format!("consumer {} has a negative weight, endowment, or share", c.id),
            );
        }
        if c.endowment.iter().chain(&c.shares).any(|v| !v.is_finite()) || !c.weight.is_finite() {
            rep.error(
                "finite-values",
                format!("consumer {} carries a non-finite number", c.id),
            );
        }
    }
    for (j, firm) in econ.firms.iter().enumerate() {
        if firm.offset.len() != ell || firm.generators.iter().any(|g| g.len() != ell) {
            rep.error(
                "dimensions",
                format!("firm {j} has offset/generators of the wrong length"),
            );
        }
        if firm.kind == TechnologyKind::Zero && !firm.generators.is_empty() {
            rep.error(
                "zero-firm-shape",
                format!("firm {j} is a singleton technology but declares generators"),
            );
        }
    }
    if rep.0.iter().any(|f| f.severity == Severity::Error) {
        // Dimension errors poison the remaining rules.
        let passed = false;
        return ValidationReport {
            passed,
            findings: rep.0,
        };
    }

    // Probability weights.
    let total_weight: f64 = econ.consumers.iter().map(|c| c.weight).sum();
    if (total_weight - 1.0).abs() > 1e-9 {
        rep.error(
            "weights-sum",
            format!("consumer weights sum to {total_weight}, expected 1"),
        );
    }

    // Share columns integrate to one per firm.
    for j in 0..econ.firms.len() {
        let col: f64 = econ.consumers.iter().map(|c| c.weight * c.shares[j]).sum();
        if (col - 1.0).abs() > 1e-9 {
            rep.error(
                "share-columns",
                format!("weighted shares of firm {j} sum to {col}, expected 1"),
            );
        }
    }

    // Integrable bound on bads, finite-economy form: finite bad bounds.
    for c in &econ.consumers {
        for i in 0..k {
            if !c.bounds[i].is_finite() {
                rep.error(
                    "bad-bounds-finite",
                    format!("consumer {} has an unbounded box on bad commodity {i}", c.id),
                );
            }
        }
    }

    // A declared monotone witness set per good.
    for s in econ.commodities.goods() {
        match econ.monotone_witnesses.get(&s) {
            None => rep.error(
                "monotone-witness",
                format!("good {s} has no declared strongly-monotone witness set"),
            ),
            Some(ids) if ids.is_empty() => rep.error(
                "monotone-witness",
                format!("good {s} has an empty strongly-monotone witness set"),
            ),
            Some(ids) => {
                for id in ids {
                    match econ.consumer_index(id) {
                        None => rep.error(
                            "monotone-witness",
                            format!("good {s} lists unknown consumer {id} as witness"),
                        ),
                        Some(ci) => {
                            let c = &econ.consumers[ci];
                            if !c.preference.strongly_monotone_in(s) || c.bounds[s].is_finite() {
                                rep.warning(
                                    "monotone-witness",
                                    format!(
                                        "witness {id} for good {s} is not verifiably strongly monotone with an unbounded box"
                                    ),
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    // Survival: e(omega) = x - sum_j theta_j y_j with x in the box.
    for c in &econ.consumers {
        if !survival_feasible(c, &econ.firms, ell) {
            rep.error(
                "survival",
                format!(
                    "consumer {} cannot express its endowment as box consumption net of owned production",
                    c.id
                ),
            );
        }
    }

    // Pointedness of the aggregate cone, necessary conditions only: no
    // generator in the positive orthant, no generator paired with its
    // negation (partial check; full verification is a conic feasibility
    // problem).
    let mut all_rays: Vec<Vec<f64>> = Vec::new();
    for firm in &econ.firms {
        if firm.kind == TechnologyKind::ConeRays {
            all_rays.extend(firm.effective_rays(ell));
        }
    }
    for (r, g) in all_rays.iter().enumerate() {
        let norm: f64 = g.iter().map(|v| v.abs()).sum();
        if norm == 0.0 {
            continue;
        }
        if g.iter().all(|v| *v >= 0.0) {
            rep.error(
                "cone-pointedness",
                format!(
                    "aggregate cone meets the positive orthant: generator {r} = {g:?} is nonnegative and nonzero (partial check)"
                ),
            );
        }
        for h in &all_rays[r + 1..] {
            let hnorm: f64 = h.iter().map(|v| v.abs()).sum();
            if hnorm == 0.0 {
                continue;
            }
            let cos: f64 = dot(g, h) / (norm_2(g) * norm_2(h));
            if cos < -1.0 + 1e-12 {
                rep.error(
                    "cone-pointedness",
                    format!(
                        "aggregate cone contains a line: generators {g:?} and {h:?} are antiparallel (partial check)"
                    ),
                );
            }
        }
    }

    // Bad-loving quadratic preferences get flagged, not rejected.
    for c in &econ.consumers {
        if let Family::QuadraticBad { coefficient, .. } = &c.preference.family {
            if *coefficient < 0.0 {
                rep.warning(
                    "bad-loving",
                    format!("consumer {} has a convex (bad-loving) quadratic term", c.id),
                );
            }
        }
    }

    let passed = !rep.0.iter().any(|f| f.severity == Severity::Error);
    ValidationReport {
        passed,
        findings: rep.0,
    }
}

fn norm_2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Feasibility of `e + sum_j theta_j y_j(a)` hitting the consumption box
/// over nonnegative activities (convex weights for polytopes). Solved by
/// alternating exact minimization: clamp the current point into the box,
/// then fit the activities to the clamped target by nonnegative least
/// squares. Both half-steps are exact on a convex problem, so the box
/// distance decreases geometrically.
fn survival_feasible(consumer: &Consumer, firms: &[Technology], ell: usize) -> bool {
    use nalgebra::{DMatrix, DVector};

    // Fixed part: endowment plus owned offsets.
    let mut base = consumer.endowment.clone();
    for (j, firm) in firms.iter().enumerate() {
        for (i, o) in firm.offset.iter().enumerate() {
            base[i] += consumer.shares[j] * o;
        }
    }
    let clamp = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&consumer.bounds)
            .map(|(v, b)| v.max(0.0).min(*b))
            .collect()
    };
    let box_distance = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&consumer.bounds)
            .map(|(v, b)| (-v).max(0.0).max(v - b))
            .fold(0.0f64, f64::max)
    };
    let scale = 1.0
        + consumer.endowment.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        + base.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-8 * scale;
    if box_distance(&base) <= tol {
        return true;
    }

    // Columns: theta * generator per cone ray, theta * vertex per polytope
    // vertex (polytope weights carry a penalty row pinning their sum to 1).
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut simplex_groups: Vec<(usize, usize)> = Vec::new();
    for (j, firm) in firms.iter().enumerate() {
        let theta = consumer.shares[j];
        match firm.kind {
            TechnologyKind::Zero => {}
            TechnologyKind::ConeRays => {
                for g in firm.effective_rays(ell) {
                    columns.push(g.iter().map(|v| theta * v).collect());
                }
            }
            TechnologyKind::Polytope => {
                let start = columns.len();
                for v in &firm.generators {
                    columns.push(v.iter().map(|x| theta * x).collect());
                }
                simplex_groups.push((start, firm.generators.len()));
            }
        }
    }
    if columns.is_empty() {
        return false;
    }

    const PENALTY: f64 = 1e2;
    let rows = ell + simplex_groups.len();
    let mut a = DMatrix::zeros(rows, columns.len());
    for (k, col) in columns.iter().enumerate() {
        for i in 0..ell {
            a[(i, k)] = col[i];
        }
    }
    for (s, (start, len)) in simplex_groups.iter().enumerate() {
        for k in *start..start + len {
            a[(ell + s, k)] = PENALTY;
        }
    }
    let mut x = base.clone();
    for _ in 0..500 {
        let target = clamp(&x);
        let mut b = DVector::zeros(rows);
        for i in 0..ell {
            b[i] = target[i] - base[i];
        }
        for (s, _) in simplex_groups.iter().enumerate() {
            b[ell + s] = PENALTY;
        }
        let v = crate::solver::nnls::nnls(&a, &b);
        x = base.clone();
        for (k, col) in columns.iter().enumerate() {
            for i in 0..ell {
                x[i] += v[k] * col[i];
            }
        }
        if box_distance(&x) <= tol {
            return true;
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Builders

fn consumer_ids(n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|s| format!("w{s:0width$}")).collect()
}

/// Two commodities (bad first, good second), consumers omega = s/n with
/// equal weight, endowment (1, 2) in internal order, utility
/// `x_good - omega * x_bad^2`, no firms. The bad bound 10n stays slack at
/// the known equilibrium while keeping the box compact on the bad.
pub fn build_hara_economy(n: usize) -> Result<Economy, EconomyError> {
    if n == 0 {
        return Err(EconomyError::Domain("economy size n must be positive".into()));
    }
    let ids = consumer_ids(n);
    let weight = 1.0 / n as f64;
    let consumers = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let omega = (i + 1) as f64 / n as f64;
            Consumer {
                id: id.clone(),
                weight,
                endowment: vec![1.0, 2.0],
                shares: vec![],
                bounds: vec![10.0 * n as f64, f64::INFINITY],
                preference: PreferenceSpec::new(Family::QuadraticBad {
                    good: 1,
                    bad: 0,
                    coefficient: omega,
                }),
            }
        })
        .collect();
    let mut witnesses = BTreeMap::new();
    witnesses.insert(1usize, ids);
    Ok(Economy {
        commodities: CommoditySpace::new(2, 1, vec!["bad".into(), "good".into()]),
        consumers,
        firms: vec![],
        monotone_witnesses: witnesses,
    })
}

/// Whether a consumer at position omega carries the hoarding-disorder
/// utility `ln(x_3) + x_1` (the band (0.5, 0.6), open on both ends).
pub fn hoards(omega: f64) -> bool {
    omega > 0.5 && omega < 0.6
}

/// Three commodities (garbage, human capital, consumption good), consumers
/// at the midpoints of n equal cells of the unit interval, endowment
/// (0, 2*omega, 0), box [0, omega] x [0, inf)^2, log utility over the
/// consumption good with
/// garbage aversion outside the hoarding band, and two cone firms: one turns
/// human capital into the consumption good emitting garbage, the other
/// eliminates garbage using human capital.
pub fn build_garbage_economy(n: usize) -> Result<Economy, EconomyError> {
    if n == 0 {
        return Err(EconomyError::Domain("economy size n must be positive".into()));
    }
    let ids = consumer_ids(n);
    let weight = 1.0 / n as f64;
    let consumers = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let omega = (i as f64 + 0.5) / n as f64;
            Consumer {
                id: id.clone(),
                weight,
                endowment: vec![0.0, 2.0 * omega, 0.0],
                shares: vec![1.0, 1.0],
                bounds: vec![omega, f64::INFINITY, f64::INFINITY],
                preference: PreferenceSpec::new(Family::LogMinusLinear {
                    good: 2,
                    bad: 0,
                    sign: if hoards(omega) { 1.0 } else { -1.0 },
                }),
            }
        })
        .collect();
    let firms = vec![
        Technology::cone(vec![vec![1.0, -1.0, 1.0]]),
        Technology::cone(vec![vec![-1.0, -1.0, 0.0]]),
    ];
    let mut witnesses = BTreeMap::new();
    witnesses.insert(1usize, ids.clone());
    witnesses.insert(2usize, ids);
    Ok(Economy {
        commodities: CommoditySpace::new(
            3,
            1,
            vec![
                "garbage".into(),
                "human_capital".into(),
                "consumption_good".into(),
            ],
        ),
        consumers,
        firms,
        monotone_witnesses: witnesses,
    })
}

/// One consumer, two commodities (bad, good), endowment (1, 1), utility
/// `x_good - x_bad`, no firms. The bad bound 2 keeps the box compact on the
/// bad without pinning the equilibrium bundle to a box corner.
pub fn build_one_agent_economy() -> Economy {
    let consumer = Consumer {
        id: "agent".into(),
        weight: 1.0,
        endowment: vec![1.0, 1.0],
        shares: vec![],
        bounds: vec![2.0, f64::INFINITY],
        preference: PreferenceSpec::new(Family::Linear {
            coefficients: vec![-1.0, 1.0],
        }),
    };
    let mut witnesses = BTreeMap::new();
    witnesses.insert(1usize, vec!["agent".into()]);
    Economy {
        commodities: CommoditySpace::new(2, 1, vec!["bad".into(), "good".into()]),
        consumers: vec![consumer],
        firms: vec![],
        monotone_witnesses: witnesses,
    }
}

// ---------------------------------------------------------------------------
// Weighted-to-unweighted rescaling

/// Rescales a positive-weight economy to uniform weights 1/n: with
/// `s = n * mu_omega`, bounds, endowments, and shares scale by `s` and the
/// utility composes as `u'(x') = u(x'/s)`. A bundle `x'` of the rescaled
/// economy maps to `x'/s` in the original at the same price.
pub fn rescale_to_unweighted(econ: &Economy) -> Result<Economy, EconomyError> {
    let n = econ.consumers.len() as f64;
    let mut out = econ.clone();
    for c in &mut out.consumers {
        if c.weight <= 0.0 {
            return Err(EconomyError::ZeroWeight(c.id.clone()));
        }
        let s = n * c.weight;
        c.weight = 1.0 / n;
        c.endowment.iter_mut().for_each(|v| *v *= s);
        c.shares.iter_mut().for_each(|v| *v *= s);
        c.bounds.iter_mut().for_each(|v| *v *= s);
        c.preference.scale *= s;
    }
    Ok(out)
}
